"""Adapting a pretrained denoiser: full fine-tuning, LoRA and DreamBooth."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import content_hash
from .data import denormalize, normalize, read_pgm, write_pgm
from .denoiser import IDENTIFIER, UNK, Denoiser, attention_targets
from .diffusion import NoiseSchedule, TrainConfig, sample_loop, train_loop, training_loss
from .rng import RandomStream, normal

log = logging.getLogger(__name__)

METHODS = ("full", "lora", "dreambooth")
_PRIOR_SHUFFLE = 3 << 40


# ---------------------------------------------------------------- LoRA


@dataclass
class LoraAdapter:
    """Low-rank deltas ``(alpha / rank) B A`` keyed by base weight name."""

    rank: int = 4
    alpha: float = 4.0
    entries: dict = field(default_factory=dict)  # name -> (A (r, d_in), B (d_out, r))

    @property
    def scale(self) -> float:
        return float(self.alpha) / self.rank

    @property
    def targets(self) -> list[str]:
        return sorted(self.entries)

    def __contains__(self, name) -> bool:
        return name in self.entries

    def forward(self, name, x, w, b=None) -> Tensor:
        a, bmat = self.entries[name]
        return lora_forward(x, w, a, bmat, self.scale, b)

    def params(self) -> dict:
        out = {}
        for name, (a, b) in self.entries.items():
            out[f"{name}.A"] = a
            out[f"{name}.B"] = b
        return out

    def num_params(self) -> int:
        return sum(a.data.size + b.data.size for a, b in self.entries.values())

    def delta(self, name) -> np.ndarray:
        a, b = self.entries[name]
        return self.scale * (b.data.astype(np.float64) @ a.data.astype(np.float64))

    def tensors(self) -> dict:
        return {k: v.data for k, v in self.params().items()}

    @classmethod
    def from_tensors(cls, tensors: dict, rank: int, alpha: float) -> "LoraAdapter":
        names = sorted({k[: -len(".A")] for k in tensors if k.endswith(".A")})
        entries = {}
        for name in names:
            if f"{name}.B" not in tensors:
                raise ValueError(f"adapter entry {name} lacks its B matrix")
            entries[name] = (ag.parameter(tensors[f"{name}.A"]), ag.parameter(tensors[f"{name}.B"]))
        adapter = cls(rank, alpha, entries)
        adapter.validate()
        return adapter

    def validate(self, base: dict | None = None) -> None:
        for name, (a, b) in self.entries.items():
            if a.ndim != 2 or b.ndim != 2 or a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise ValueError(f"adapter entry {name} is inconsistent with rank {self.rank}")
            if base is not None:
                if name not in base:
                    raise ValueError(f"adapter target {name} is not a base parameter")
                if base[name].shape != (b.shape[0], a.shape[1]):
                    raise ValueError(f"adapter entry {name} does not fit base shape {base[name].shape}")


def lora_init(base: dict, rank: int = 4, alpha: float = 4.0, targets=None, stream: RandomStream | None = None) -> LoraAdapter:
    """``A ~ N(0, 0.02^2)``, ``B = 0`` for each target weight matrix."""
    if rank < 1:
        raise ValueError("rank must be at least 1")
    if targets is None:
        targets = attention_targets(base)
    stream = stream or RandomStream(0)
    entries = {}
    for k, name in enumerate(sorted(targets)):
        if name not in base:
            raise ValueError(f"unknown adapter target {name!r}")
        w = base[name]
        if w.ndim != 2:
            raise ValueError(f"adapter target {name!r} is not a 2-D weight matrix")
        d_out, d_in = w.shape
        a = ag.parameter(0.02 * normal(stream.child(k), (rank, d_in)))
        b = ag.parameter(np.zeros((d_out, rank)))
        entries[name] = (a, b)
    return LoraAdapter(rank, alpha, entries)


def lora_forward(x, w, a, b, scale: float, bias=None) -> Tensor:
    """``W x + scale * B (A x)`` along the last axis of ``x``, plus optional bias."""
    x = ag.as_tensor(x)
    w, a, b = ag.as_tensor(w), ag.as_tensor(a), ag.as_tensor(b)
    d_out, d_in = w.shape
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != d_in or b.shape != (d_out, a.shape[0]):
        raise ValueError(f"adapter shapes A{a.shape} B{b.shape} do not fit W{w.shape}")
    if x.shape[-1] != d_in:
        raise ValueError(f"input width {x.shape[-1]} does not match W{w.shape}")
    base = ag.linear(x, w, bias)
    return base + ag.scale(ag.linear(ag.linear(x, a), b), scale)


def lora_merge(base: dict, adapter: LoraAdapter) -> dict:
    """Fold every delta into a copy of ``base``; untouched entries are shared."""
    adapter.validate(base)
    merged = dict(base)
    for name in adapter.entries:
        w = base[name].data
        merged[name] = ag.parameter((w.astype(np.float64) + adapter.delta(name)).astype(w.dtype))
    return merged


def lora_unmerge(merged: dict, adapter: LoraAdapter) -> dict:
    adapter.validate(merged)
    out = dict(merged)
    for name in adapter.entries:
        w = merged[name].data
        out[name] = ag.parameter((w.astype(np.float64) - adapter.delta(name)).astype(w.dtype))
    return out


# ---------------------------------------------------------------- DreamBooth


@dataclass
class DreamBoothConfig:
    identifier: str = "[V]"
    class_prompt: str = "a landscape painting"
    instance_prompt: str | None = None  # default: identifier inserted before the class noun
    prior_weight: float = 1.0
    prior_count: int = 200
    lr: float = 1e-5
    prior_guidance: float = 1.0

    def __post_init__(self):
        if self.prior_weight < 0:
            raise ValueError("prior weight must be non-negative")
        if self.prior_count < 1:
            raise ValueError("prior set size must be at least 1")
        if self.instance_prompt is None:
            words = self.class_prompt.split()
            if words and words[0].lower() in ("a", "an", "the"):
                self.instance_prompt = " ".join([words[0], self.identifier] + words[1:])
            else:
                self.instance_prompt = f"{self.identifier} {self.class_prompt}"

    def to_dict(self) -> dict:
        return asdict(self)


def has_identifier(prompt: str, identifier: str = "[V]") -> bool:
    return identifier.lower() in prompt.lower().split()


def prior_preservation_total(instance_loss, prior_loss, weight: float):
    """``instance + weight * prior``; ``weight`` must be non-negative."""
    if weight < 0:
        raise ValueError("prior weight must be non-negative")
    if isinstance(instance_loss, Tensor) or isinstance(prior_loss, Tensor):
        return ag.add(instance_loss, ag.scale(ag.as_tensor(prior_loss), weight))
    return instance_loss + weight * prior_loss


def dreambooth_loss(
    instance_x,
    instance_ids,
    prior_x,
    prior_ids,
    model,
    schedule: NoiseSchedule,
    config: DreamBoothConfig,
    stream: RandomStream,
    p_drop: float = 0.0,
) -> Tensor:
    """Instance noise loss plus ``prior_weight`` times the prior-set noise loss.

    Each term is ``training_loss``; the instance term draws from
    ``stream.child(0)`` and the prior term from ``stream.child(1)``. With zero
    weight the prior term is skipped, so the result is the instance loss itself.
    """
    if config.prior_weight < 0:
        raise ValueError("prior weight must be non-negative")
    inst = training_loss(instance_x, instance_ids, model, schedule, stream.child(0), p_drop)
    if config.prior_weight == 0:
        return inst
    prior = training_loss(prior_x, prior_ids, model, schedule, stream.child(1), p_drop)
    return prior_preservation_total(inst, prior, config.prior_weight)


def prepare_priors(
    model: Denoiser,
    class_prompt: str,
    count: int,
    stream: RandomStream,
    schedule: NoiseSchedule,
    out_dir=None,
    guidance: float = 1.0,
    batch_size: int = 64,
    pixel_space: bool = True,
) -> np.ndarray:
    """Sample the class prior set from the frozen base model, cached under ``out_dir``.

    Images pass through 8-bit quantisation so a cached set and a fresh one are
    identical. The cache is keyed by the base weights, prompt, count and stream.
    Latent-space models (``pixel_space=False``) get raw samples and no cache.
    """
    if count < 1:
        raise ValueError("prior set size must be at least 1")
    if IDENTIFIER in model.tokenize(class_prompt):
        raise ValueError("the class prompt must not contain the identifier token")
    key = {
        "base_hash": content_hash({k: v.data for k, v in model.params.items()}),
        "prompt": class_prompt,
        "count": count,
        "stream": [stream.seed, stream.stream_id, stream.counter],
        "guidance": guidance,
        "T": schedule.T,
    }
    manifest_path = Path(out_dir) / "manifest.json" if out_dir is not None and pixel_space else None
    if manifest_path is not None and manifest_path.exists():
        cached = json.loads(manifest_path.read_text())
        if cached.get("key") == key:
            log.info("using cached prior set at %s", out_dir)
            return np.stack([normalize(read_pgm(Path(out_dir) / f))[None] for f in cached["files"]])
    with ag.no_grad():
        adapter, model.adapter = model.adapter, None
        try:
            x = sample_loop(model, class_prompt, schedule, stream, guidance, count, batch_size=batch_size, clamp=pixel_space)
        finally:
            model.adapter = adapter
    if not pixel_space:
        return x
    pixels = [denormalize(img[0]) for img in x]
    if manifest_path is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        files = []
        for i, im in enumerate(pixels):
            files.append(f"prior_{i:04d}.pgm")
            write_pgm(Path(out_dir) / files[-1], im)
        manifest_path.write_text(json.dumps({"key": key, "files": files}, indent=1))
    return np.stack([normalize(im)[None] for im in pixels])


def _prior_batch(count: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    per_epoch = -(-count // batch_size)
    order = RandomStream(seed, _PRIOR_SHUFFLE + step // per_epoch).permutation(count)
    k = step % per_epoch
    return order[k * batch_size : (k + 1) * batch_size]


# ---------------------------------------------------------------- loop


@dataclass
class FinetuneConfig:
    method: str = "lora"
    steps: int = 500
    lr: float | None = None  # None: 1e-4, or the DreamBooth config's rate
    batch_size: int = 32
    seed: int = 0
    p_drop: float = 0.1
    rank: int = 4
    alpha: float = 4.0
    targets: list | None = None
    log_every: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FinetuneReport:
    method: str
    steps: int
    final_loss: float | None
    output: str | None = None
    trainable_params: int = 0
    lr: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FinetuneResult:
    report: FinetuneReport
    model: Denoiser
    adapter: LoraAdapter | None
    losses: list


@contextmanager
def _trainable_only(params: dict, names):
    """Switch gradient tracking off for every parameter outside ``names``."""
    names = set(names)
    saved = {k: p.requires_grad for k, p in params.items()}
    try:
        for k, p in params.items():
            p.requires_grad = k in names
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]


def finetune_loop(
    method: str,
    base: Denoiser,
    images: np.ndarray,
    prompts,
    config: FinetuneConfig,
    schedule: NoiseSchedule,
    dreambooth: DreamBoothConfig | None = None,
    priors: np.ndarray | None = None,
    prior_dir=None,
    log_file=None,
    pixel_space: bool = True,
) -> FinetuneResult:
    """Adapt ``base`` to ``images``; the base model object is never modified.

    full: every denoiser weight trains, the token table stays frozen.
    lora: only adapter matrices train.
    dreambooth: denoiser weights plus the identifier's embedding row train,
    with a prior-preservation term on class-prompt samples of the base model.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    prompts = list(prompts)
    if len(prompts) != len(images):
        raise ValueError("need one prompt per image")
    ids = base.tokenize(prompts)
    tc = TrainConfig(config.batch_size, config.steps, 1.0, config.p_drop, config.seed, log_every=config.log_every)
    stream = RandomStream(config.seed, 1 << 41)
    adapter = None
    grad_hook = None
    loss_fn = None

    if method == "lora":
        adapter = lora_init(base.params, config.rank, config.alpha, config.targets, stream)
        model = Denoiser(base.config, base.vocab, base.params, adapter)
        params = adapter.params()
        trainable = list(params)
        freeze_scope = {**base.params, **params}
        lr = config.lr or 1e-4
    else:
        clone = {k: ag.parameter(p.data) for k, p in base.params.items()}
        model = Denoiser(base.config, base.vocab, clone)
        params = clone
        trainable = [k for k in clone if k != "embed.tokens"]
        freeze_scope = clone
        lr = config.lr or 1e-4

    if method == "dreambooth":
        db = dreambooth or DreamBoothConfig()
        ident = base.vocab.id(db.identifier)
        if ident == UNK:
            raise ValueError(f"identifier {db.identifier!r} is not in the vocabulary")
        missing = [p for p in prompts if not has_identifier(p, db.identifier)]
        if missing:
            raise ValueError(
                f"dreambooth training prompts must contain the identifier {db.identifier}; "
                f"{len(missing)} do not, e.g. {missing[0]!r}"
            )
        lr = config.lr or db.lr
        if priors is None and db.prior_weight > 0:
            priors = prepare_priors(
                base, db.class_prompt, db.prior_count, RandomStream(config.seed, 1 << 42), schedule, prior_dir,
                db.prior_guidance, pixel_space=pixel_space,
            )
        if priors is not None:
            prior_ids = np.repeat(base.tokenize(db.class_prompt), len(priors), axis=0)
        trainable = list(clone)

        def grad_hook(grads):
            g = grads.get("embed.tokens")
            if g is not None:
                keep = g[ident].copy()
                g[:] = 0
                g[ident] = keep

        def loss_fn(x0, batch_ids, step_rng, step):
            if priors is None:
                return dreambooth_loss(x0, batch_ids, None, None, model, schedule, db, step_rng, config.p_drop)
            pidx = _prior_batch(len(priors), config.batch_size, config.seed, step)
            return dreambooth_loss(x0, batch_ids, priors[pidx], prior_ids[pidx], model, schedule, db, step_rng, config.p_drop)

    tc.lr = lr
    with _trainable_only(freeze_scope, trainable):
        _, losses = train_loop(
            images, ids, model, schedule, tc, params=params, trainable=trainable,
            loss_fn=loss_fn, grad_hook=grad_hook, log_file=log_file, check_range=pixel_space,
        )
    count = sum(params[k].data.size for k in trainable)
    if method == "dreambooth":
        count -= params["embed.tokens"].data.size - params["embed.tokens"].shape[1]
    report = FinetuneReport(method, config.steps, losses[-1] if losses else None, None, int(count), float(lr))
    return FinetuneResult(report, model, adapter, losses)
