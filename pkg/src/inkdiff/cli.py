"""``inkdiff`` command line: data generation, training, fine-tuning, sampling,
evaluation and reporting.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autoencoder import Autoencoder, AutoencoderConfig, train_autoencoder
from .checkpoint import CheckpointError, content_hash, load_checkpoint, save_checkpoint
from .data import PROMPTS, DatasetManifest, contact_sheet, denormalize, style_split, synth_generate, write_pgm
from .denoiser import Denoiser, DenoiserConfig, TokenVocabulary
from .diffusion import NoiseSchedule, TrainConfig, make_schedule, sample_loop, train_loop
from .evaluation import (
    STYLE_LABELS,
    ClassifierConfig,
    Extractor,
    RatingTable,
    cluster_ratings,
    fid_protocol,
    train_classifier,
)
from .finetune import DreamBoothConfig, FinetuneConfig, LoraAdapter, finetune_loop, has_identifier
from .optim import AdamState
from .rng import RandomStream

log = logging.getLogger("inkdiff")


class UsageError(Exception):
    """Bad arguments or configuration (exit 1)."""


class DataError(Exception):
    """Unreadable or inconsistent inputs (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- run config


_EVAL_KEYS = {"repeats": 10, "n": 256, "guidance": 1.0, "batch_size": 128}
SECTIONS = {
    "model": [f.name for f in fields(DenoiserConfig) if f.name not in ("vocab_size", "T", "image_size", "in_channels")],
    "schedule": ["T", "beta_1", "beta_T", "variance"],
    "train": [f.name for f in fields(TrainConfig)],
    "finetune": [f.name for f in fields(FinetuneConfig) if f.name != "method"],
    "dreambooth": [f.name for f in fields(DreamBoothConfig)],
    "classifier": [f.name for f in fields(ClassifierConfig) if f.name != "image_size"],
    "autoencoder": [f.name for f in fields(AutoencoderConfig) if f.name != "image_size"],
    "eval": list(_EVAL_KEYS),
}


def load_run_config(path) -> dict:
    """Parse a JSON run config, rejecting unknown sections and keys."""
    if path is None:
        return {s: {} for s in SECTIONS}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object of sections")
    out = {s: {} for s in SECTIONS}
    for section, values in raw.items():
        if section not in SECTIONS:
            raise UsageError(f"unknown config section {section!r}; valid sections: {', '.join(SECTIONS)}")
        if not isinstance(values, dict):
            raise UsageError(f"config section {section!r} must be an object")
        for key in values:
            if key not in SECTIONS[section]:
                raise UsageError(
                    f"unknown key {key!r} in config section {section!r}; valid keys: {', '.join(SECTIONS[section])}"
                )
        out[section] = dict(values)
    return out


def _build(cls, values: dict, **overrides):
    merged = {**values, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


# ---------------------------------------------------------------- model files


def params_hash(params: dict) -> str:
    return content_hash({k: (v.data if isinstance(v, ag.Tensor) else v) for k, v in params.items()})


def save_denoiser(path, model: Denoiser, schedule: NoiseSchedule, step: int, extra: dict | None = None, opt_state=None):
    tensors = {k: p.data for k, p in model.params.items()}
    if opt_state is not None:
        for k, m in opt_state.m.items():
            tensors[f"opt.m.{k}"] = m
            tensors[f"opt.v.{k}"] = opt_state.v[k]
    meta = {
        "kind": "denoiser",
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_json(),
        "schedule": schedule.to_dict(),
        "step": int(step),
        "param_hash": params_hash(model.params),
        **(extra or {}),
    }
    save_checkpoint(path, tensors, meta)


def load_denoiser(path):
    tensors, meta = load_checkpoint(path)
    if meta["kind"] != "denoiser":
        raise CheckpointError(f"{path} holds a {meta['kind']} checkpoint, not a denoiser")
    try:
        config = DenoiserConfig.from_dict(meta["config"])
        vocab = TokenVocabulary(meta["vocab"])
        s = meta["schedule"]
        schedule = make_schedule(s["T"], s["beta_1"], s["beta_T"], s.get("variance", "beta"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad denoiser metadata: {exc}") from exc
    params = {k: ag.parameter(v) for k, v in tensors.items() if not k.startswith("opt.")}
    opt = AdamState(meta.get("step", 0))
    for k, v in tensors.items():
        if k.startswith("opt.m."):
            opt.m[k[6:]] = v
        elif k.startswith("opt.v."):
            opt.v[k[6:]] = v
    return Denoiser(config, vocab, params), schedule, meta, opt


def save_adapter(path, adapter: LoraAdapter, base_hash: str, extra: dict | None = None):
    meta = {
        "kind": "lora-adapter",
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "targets": adapter.targets,
        "base_hash": base_hash,
        **(extra or {}),
    }
    save_checkpoint(path, adapter.tensors(), meta)


def load_adapter(path, base: Denoiser) -> tuple[LoraAdapter, dict]:
    tensors, meta = load_checkpoint(path)
    if meta["kind"] != "lora-adapter":
        raise CheckpointError(f"{path} holds a {meta['kind']} checkpoint, not a LoRA adapter")
    actual = params_hash(base.params)
    if meta.get("base_hash") != actual:
        raise CheckpointError(
            f"adapter {path} was trained against a different base checkpoint "
            f"(base hash {meta.get('base_hash', '?')[:12]}..., this base {actual[:12]}...)"
        )
    adapter = LoraAdapter.from_tensors(tensors, int(meta["rank"]), float(meta["alpha"]))
    adapter.validate(base.params)
    return adapter, meta


def save_extractor(path, ex: Extractor):
    meta = {"kind": "classifier", "config": ex.config.to_dict(), "extractor": ex.kind, "accuracy": ex.accuracy}
    save_checkpoint(path, {k: p.data for k, p in ex.params.items()}, meta)


def load_extractor(path) -> Extractor:
    tensors, meta = load_checkpoint(path)
    if meta["kind"] != "classifier":
        raise CheckpointError(f"{path} holds a {meta['kind']} checkpoint, not a feature extractor")
    config = ClassifierConfig(**meta["config"])
    return Extractor(config, {k: ag.parameter(v) for k, v in tensors.items()}, meta["extractor"], meta.get("accuracy"))


def save_autoencoder(path, ae: Autoencoder):
    meta = {"kind": "autoencoder", "config": ae.config.to_dict(), "latent_scale": ae.latent_scale}
    save_checkpoint(path, {k: p.data for k, p in ae.params.items()}, meta)


def load_autoencoder(path) -> Autoencoder:
    tensors, meta = load_checkpoint(path)
    if meta["kind"] != "autoencoder":
        raise CheckpointError(f"{path} holds a {meta['kind']} checkpoint, not an autoencoder")
    return Autoencoder(AutoencoderConfig(**meta["config"]), {k: ag.parameter(v) for k, v in tensors.items()}, meta["latent_scale"])


@dataclass
class Bundle:
    """A loaded denoiser plus whatever it needs to produce pixel images."""

    model: Denoiser
    schedule: NoiseSchedule
    meta: dict
    autoencoder: Autoencoder | None = None

    @property
    def method(self) -> str:
        if self.model.adapter is not None:
            return "lora"
        return (self.meta.get("finetune") or {}).get("method", "pretrained")

    @property
    def identifier(self) -> str | None:
        ft = self.meta.get("finetune") or {}
        return ft.get("identifier") if ft.get("method") == "dreambooth" else None

    @property
    def decode(self):
        return None if self.autoencoder is None else self.autoencoder.decode

    def sample(self, prompt, count, stream, guidance=1.0) -> np.ndarray:
        latent = self.autoencoder is not None
        x = sample_loop(self.model, prompt, self.schedule, stream, guidance, count, clamp=not latent)
        return np.clip(self.autoencoder.decode(x), -1.0, 1.0) if latent else x


def load_bundle(ckpt, adapter=None, autoencoder=None) -> Bundle:
    model, schedule, meta, _ = load_denoiser(ckpt)
    adapter_meta = None
    if adapter is not None:
        model.adapter, adapter_meta = load_adapter(adapter, model)
    ae = None
    if meta.get("latent"):
        ae_path = autoencoder or meta["latent"].get("autoencoder")
        if ae_path is None:
            raise UsageError("this is a latent-space model; pass --autoencoder")
        ae = load_autoencoder(ae_path)
    bundle = Bundle(model, schedule, meta, ae)
    if adapter_meta is not None:
        bundle.meta = {**meta, "adapter": adapter_meta}
    return bundle


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    a, b = style_split(args.total)
    a = args.count_a if args.count_a is not None else a
    b = args.count_b if args.count_b is not None else b
    try:
        m = synth_generate(a, b, args.size, args.seed, args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"wrote {len(m.records)} images ({a} chinese, {b} modern) to {args.out}")
    return 0


def _load_manifest(path) -> DatasetManifest:
    try:
        return DatasetManifest.load(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_train_autoencoder(args) -> int:
    cfg = load_run_config(args.config)
    config = _build(AutoencoderConfig, cfg["autoencoder"], steps=args.steps, seed=args.seed)
    images, _ = _load_manifest(args.data).load_images(None)
    ae = train_autoencoder(images, config)
    save_autoencoder(args.out, ae)
    print(f"autoencoder saved to {args.out} (latent scale {ae.latent_scale:.4f})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest(args.data)
    images, prompts = manifest.load_images(None)
    tc = _build(TrainConfig, cfg["train"], steps=args.steps, seed=args.seed)
    latent_meta = None
    size, channels = manifest.image_size, 1
    if tc.latent:
        if args.autoencoder is None:
            raise UsageError("latent mode requires a trained autoencoder (--autoencoder)")
        ae = load_autoencoder(args.autoencoder)
        images = ae.encode(images)
        channels, size = images.shape[1], images.shape[2]
        latent_meta = {"autoencoder": str(args.autoencoder)}
    if args.resume:
        model, schedule, meta, opt_state = load_denoiser(args.resume)
        if meta.get("train", {}).get("seed", tc.seed) != tc.seed:
            raise UsageError("resume must use the seed of the original run")
    else:
        schedule = _build(make_schedule, cfg["schedule"])
        vocab = TokenVocabulary.from_prompts(prompts)
        dconf = _build(
            DenoiserConfig, cfg["model"], image_size=size, in_channels=channels, T=schedule.T, vocab_size=len(vocab)
        )
        model = Denoiser.fresh(dconf, vocab, RandomStream(tc.seed, 1))
        opt_state = AdamState()
    ids = model.tokenize(prompts)
    log_path = args.log or f"{args.out}.log"
    with open(log_path, "a" if args.resume else "w") as log_file:
        opt_state, losses = train_loop(
            images, ids, model, schedule, tc, opt_state, log_file=log_file, check_range=not tc.latent
        )
    extra = {"train": tc.to_dict(), "finetune": None}
    if latent_meta:
        extra["latent"] = latent_meta
    save_denoiser(args.out, model, schedule, opt_state.step, extra, opt_state)
    final = f"{losses[-1]:.5f}" if losses else "n/a"
    print(f"pretrained to step {opt_state.step}, final loss {final}, saved {args.out}")
    return 0


def cmd_train_extractor(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest(args.data)
    config = _build(ClassifierConfig, cfg["classifier"], image_size=manifest.image_size, steps=args.steps, seed=args.seed)
    if args.random:
        ex = Extractor.random(config, args.seed)
    else:
        images, _ = manifest.load_images(None)
        labels = np.array([STYLE_LABELS[r["style"]] for r in manifest.records])
        order = RandomStream(args.seed, 5).permutation(len(images))
        cut = int(0.8 * len(images))
        train, held = order[:cut], order[cut:]
        ex = train_classifier(images[train], labels[train], config)
        ex.accuracy = float(np.mean(ex.predict(images[held]) == labels[held]))
        print(f"held-out style accuracy {ex.accuracy:.4f} on {len(held)} images")
    save_extractor(args.out, ex)
    return 0


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    base, schedule, meta, _ = load_denoiser(args.base)
    if meta.get("finetune"):
        raise UsageError("the base checkpoint is already fine-tuned")
    fc = _build(
        FinetuneConfig, cfg["finetune"], method=args.method, steps=args.steps, lr=args.lr, seed=args.seed,
        rank=args.rank, alpha=args.alpha,
    )
    db = _build(
        DreamBoothConfig, cfg["dreambooth"], identifier=args.identifier, prior_weight=args.prior_weight,
        prior_count=args.prior_count, class_prompt=args.class_prompt, instance_prompt=args.instance_prompt,
    )
    manifest = _load_manifest(args.data)
    images, prompts = manifest.load_images(args.class_filter)
    latent = meta.get("latent")
    ae = None
    if latent:
        ae = load_autoencoder(args.autoencoder or latent["autoencoder"])
        images = ae.encode(images)
    if args.method == "dreambooth":
        if not has_identifier(db.instance_prompt, db.identifier):
            raise UsageError(f"the instance prompt {db.instance_prompt!r} must contain the identifier {db.identifier}")
        prompts = [db.instance_prompt] * len(images)
    prior_dir = args.prior_dir or f"{args.out}.priors"
    log_path = f"{args.out}.log"
    try:
        with open(log_path, "w") as log_file:
            result = finetune_loop(
                args.method, base, images, prompts, fc, schedule, db,
                prior_dir=prior_dir, log_file=log_file, pixel_space=not latent,
            )
    except ValueError as exc:
        if "identifier" in str(exc) or "vocabulary" in str(exc):
            raise UsageError(str(exc)) from exc
        raise
    base_hash = params_hash(base.params)
    info = {
        "method": args.method,
        "class_filter": args.class_filter,
        "base_hash": base_hash,
        "config": fc.to_dict(),
    }
    if args.method == "dreambooth":
        info.update(identifier=db.identifier, dreambooth=db.to_dict())
    if args.method == "lora":
        save_adapter(args.out, result.adapter, base_hash, {"finetune": info})
    else:
        extra = {k: v for k, v in meta.items() if k in ("train", "latent")}
        save_denoiser(args.out, result.model, schedule, meta.get("step", 0), {**extra, "finetune": info})
    result.report.output = str(args.out)
    _write_json(f"{args.out}.report.json", result.report.to_dict())
    print(json.dumps(result.report.to_dict()))
    return 0


def cmd_sample(args) -> int:
    bundle = load_bundle(args.ckpt, args.adapter, args.autoencoder)
    _check_identifier(bundle, args.prompt)
    x = bundle.sample(args.prompt, args.count, RandomStream(args.seed, 3), args.guidance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pixels = [denormalize(img[0]) for img in x]
    for i, im in enumerate(pixels):
        write_pgm(out / f"sample_{i:04d}.pgm", im)
    if args.sheet:
        write_pgm(out / "sheet.pgm", contact_sheet(pixels, max(1, math.ceil(math.sqrt(len(pixels))))))
    print(f"wrote {len(pixels)} samples to {out}")
    return 0


def _check_identifier(bundle: Bundle, prompt: str) -> None:
    ident = bundle.identifier
    if ident is not None and not has_identifier(prompt, ident):
        raise UsageError(
            f"this DreamBooth model must be prompted with its unique identifier {ident}; "
            f"add it to the prompt (got {prompt!r})"
        )


def _real_class(prompt: str, bundle: Bundle, override: str | None) -> str:
    if override is not None:
        return override
    words = set(prompt.lower().split())
    hits = [s for s in PROMPTS if s in words]
    if len(hits) == 1:
        return hits[0]
    ft = bundle.meta.get("finetune") or (bundle.meta.get("adapter") or {}).get("finetune") or {}
    if ft.get("class_filter"):
        return ft["class_filter"]
    raise UsageError("cannot tell which class of real images matches this prompt; pass --real-class")


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    ev = {**_EVAL_KEYS, **cfg["eval"]}
    for key in ("repeats", "n", "guidance"):
        if getattr(args, key) is not None:
            ev[key] = getattr(args, key)
    bundle = load_bundle(args.ckpt, args.adapter, args.autoencoder)
    _check_identifier(bundle, args.prompt)
    if args.extractor is None:
        raise UsageError("--extractor is required (train one with train-extractor, or save random features with its --random flag)")
    extractor = load_extractor(args.extractor)
    manifest = _load_manifest(args.data)
    style = _real_class(args.prompt, bundle, args.real_class)
    reals, _ = manifest.load_images(style)
    try:
        report = fid_protocol(
            bundle.model, args.prompt, reals, extractor, bundle.schedule, RandomStream(args.seed, 4),
            repeats=ev["repeats"], n=ev["n"], guidance=ev["guidance"], model_tag=args.tag or bundle.method,
            required_identifier=bundle.identifier, batch_size=ev["batch_size"], decode=bundle.decode,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write_json(args.out, report.to_dict())
    print(f"{report.model}: FID {report.mean:.2f} +/- {report.std:.2f} over {report.repeats} repeats (n={report.n})")
    return 0


def cmd_rate_cluster(args) -> int:
    try:
        table = RatingTable.from_csv(args.ratings)
    except OSError as exc:
        raise DataError(f"cannot read ratings {args.ratings}: {exc}") from exc
    result = cluster_ratings(table, args.k, RandomStream(args.seed, 9))
    doc = result.to_dict()
    doc["rows"] = [
        {"expert": e, "model": m, "score": s, "cluster": c} for (e, m, s), c in zip(table.rows, result.assignments)
    ]
    _write_json(args.out, doc)
    print("centers: " + ", ".join(f"{c:.3f}" for c in result.centers))
    return 0


def format_report(reports: list[dict]) -> str:
    lines = [
        "| Model | FID (mean ± std) | Repeats | N |",
        "|---|---|---|---|",
    ]
    for r in reports:
        lines.append(f"| {r['model']} | {r['mean']:.2f} ± {r['std']:.2f} | {r['repeats']} | {r['n']} |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    reports = []
    for path in args.evals:
        try:
            d = json.loads(Path(path).read_text())
            reports.append({k: d[k] for k in ("model", "mean", "std", "repeats", "n")})
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path} is not an evaluation report: {exc}") from exc
    text = format_report(reports)
    Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_verify(args) -> int:
    problems = []
    if args.data:
        problems += _load_manifest(args.data).verify()
    for path in args.ckpt or []:
        try:
            load_checkpoint(path)
        except CheckpointError as exc:
            problems.append(str(exc))
    for p in problems:
        print(p)
    if problems:
        raise DataError(f"{len(problems)} problem(s) found")
    print("ok")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="inkdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic two-style dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--total", type=int, default=800)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count-a", type=int, help="override the chinese-style count")
    g.add_argument("--count-b", type=int, help="override the modern-style count")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("train-autoencoder", help="train the latent-mode autoencoder")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--steps", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_train_autoencoder)

    t = sub.add_parser("pretrain", help="train the conditional denoiser on both classes")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--autoencoder", help="autoencoder checkpoint for latent mode")
    t.add_argument("--log", help="loss log path (default: OUT.log)")
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("train-extractor", help="train the style classifier used for FID features")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--random", action="store_true", help="save untrained random-conv features instead")
    e.set_defaults(func=cmd_train_extractor)

    f = sub.add_parser("finetune", help="adapt a pretrained denoiser")
    f.add_argument("--method", required=True, choices=["full", "lora", "dreambooth"])
    f.add_argument("--base", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config")
    f.add_argument("--class-filter", choices=sorted(PROMPTS))
    f.add_argument("--steps", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--seed", type=int)
    f.add_argument("--rank", type=int)
    f.add_argument("--alpha", type=float)
    f.add_argument("--identifier")
    f.add_argument("--prior-weight", type=float)
    f.add_argument("--prior-count", type=int)
    f.add_argument("--class-prompt")
    f.add_argument("--instance-prompt")
    f.add_argument("--prior-dir", help="prior image cache (default: OUT.priors)")
    f.add_argument("--autoencoder")
    f.set_defaults(func=cmd_finetune)

    s = sub.add_parser("sample", help="draw images from a prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--adapter")
    s.add_argument("--autoencoder")
    s.add_argument("--prompt", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--guidance", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--sheet", action="store_true", help="also write a contact sheet")
    s.set_defaults(func=cmd_sample)

    v = sub.add_parser("evaluate", help="repeated FID against real images of the prompt's class")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--adapter")
    v.add_argument("--autoencoder")
    v.add_argument("--prompt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--extractor")
    v.add_argument("--repeats", type=int)
    v.add_argument("--n", type=int)
    v.add_argument("--guidance", type=float)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--real-class", choices=sorted(PROMPTS))
    v.add_argument("--tag", help="model name in the report")
    v.add_argument("--config")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rate-cluster", help="k-means over expert rating scores")
    r.add_argument("--ratings", required=True)
    r.add_argument("--k", type=int, default=3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rate_cluster)

    rp = sub.add_parser("report", help="markdown table of evaluation reports")
    rp.add_argument("--evals", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    vf = sub.add_parser("verify", help="check a dataset manifest and checkpoints")
    vf.add_argument("--data")
    vf.add_argument("--ckpt", nargs="*")
    vf.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"inkdiff: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"inkdiff: error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"inkdiff: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"inkdiff: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
