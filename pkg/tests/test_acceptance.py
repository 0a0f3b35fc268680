"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test prints one ``PASS`` or ``FAIL`` line before asserting.
"""

import inspect
import json
import os
import subprocess
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from inkdiff import autograd as ag
from inkdiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from inkdiff.data import synth_generate
from inkdiff.denoiser import Denoiser, TokenVocabulary
from inkdiff.diffusion import (
    draw_training_inputs,
    make_schedule,
    noise_prediction_loss,
    q_sample,
    sample_loop,
    training_loss,
)
from inkdiff.evaluation import (
    ClassifierConfig,
    FeatureGaussian,
    cluster_ratings,
    fid_protocol,
    fid_repeats,
    frechet_distance,
    sqrt_trace,
    train_classifier,
)
from inkdiff.finetune import (
    DreamBoothConfig,
    FinetuneConfig,
    dreambooth_loss,
    finetune_loop,
    lora_init,
    lora_merge,
    prior_preservation_total,
)
from inkdiff.rng import RandomStream, normal

from .conftest import CHINESE, MODERN, tiny_config
from .pipeline import mini_pipeline
from .test_autograd import UNARY
from .test_evaluation import RATING_EXAMPLE, brute_force_kmeans, oracle_sqrt_trace, random_spd

ROOT = Path(__file__).resolve().parents[1]


def verdict(capsys, number, title, ok, detail="", extra=""):
    with capsys.disabled():
        print(f"\n{extra}criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
    assert ok, f"criterion {number} failed: {detail}"


# ---------------------------------------------------------------- 1


def test_01_gradient_integrity(capsys):
    start = time.process_time()
    worst = 0.0
    rng = np.random.default_rng(0)
    with ag.default_dtype(np.float64):
        x = ag.Tensor(rng.normal(size=(3, 4)))
        for f in UNARY.values():
            worst = max(worst, ag.grad_check(f, x))
        a, w, b = ag.Tensor(rng.normal(size=(3, 5))), ag.Tensor(rng.normal(size=(4, 5))), ag.Tensor(rng.normal(size=4))
        worst = max(worst, ag.grad_check(lambda t: ag.tsum(ag.square(ag.linear(a, t, b))), w))
        img = ag.Tensor(rng.normal(size=(2, 4, 6, 6)))
        k = ag.Tensor(0.3 * rng.normal(size=(3, 4, 3, 3)))
        worst = max(worst, ag.grad_check(lambda t: ag.tsum(ag.square(ag.conv2d(t, k, padding=1))), img))
        worst = max(worst, ag.grad_check(lambda t: ag.tsum(ag.square(ag.conv2d(img, t, padding=1))), k))
        worst = max(worst, ag.grad_check(lambda t: ag.tsum(ag.square(ag.group_norm(t, 2))) + ag.tsum(t), img))
        worst = max(worst, ag.grad_check(lambda t: ag.tsum(ag.square(ag.upsample2(ag.avg_pool2(t)))), img))
        worst = max(worst, ag.grad_check(lambda t: ag.cross_entropy(t, np.array([0, 3, 1])), ag.Tensor(rng.normal(size=(3, 4)))))
        primitives = worst

        vocab = TokenVocabulary.from_prompts([CHINESE, MODERN])
        model = Denoiser.fresh(tiny_config(), vocab, RandomStream(3))
        x0 = np.clip(0.5 * rng.normal(size=(2, 1, 8, 8)), -1, 1)
        inputs = draw_training_inputs(x0, model.tokenize([CHINESE, MODERN]), make_schedule(20, 1e-3, 0.2), RandomStream(1), 0.0)
        composite, name = ag.directional_grad_check(lambda: noise_prediction_loss(model, inputs), model.params)
    elapsed = time.process_time() - start
    ok = max(primitives, composite) < 1e-5 and elapsed < 120
    verdict(capsys, 1, "gradient integrity", ok,
            f"primitives {primitives:.1e}, denoiser+loss {composite:.1e} at {name}, {elapsed:.0f}s CPU")


# ---------------------------------------------------------------- 2


def test_02_schedule_and_forward_process(capsys):
    start = time.process_time()
    s = make_schedule()
    exact = (
        np.all((s.betas > 0) & (s.betas < 1))
        and np.all(s.alpha_bars[1:] == s.alpha_bars[:-1] * s.alphas[1:])
        and np.all(s.alphas == 1 - s.betas)
        and np.all(np.diff(s.alpha_bars) < 0)
        and s.betas[0] == 1e-4 and s.betas[-1] == 0.02
    )
    # steps where the mean stays well above its sampling error
    x0 = np.full(100_000, 0.7)
    mean_err = var_err = 0.0
    for t in (100, 300):
        x = q_sample(x0, t, normal(RandomStream(2, t), x0.shape, dtype=np.float64), s)
        ab = s.alpha_bars[t - 1]
        mean_err = max(mean_err, abs(x.mean() / (np.sqrt(ab) * 0.7) - 1))
        var_err = max(var_err, abs(x.var() / (1 - ab) - 1))
    elapsed = time.process_time() - start
    ok = exact and mean_err < 0.02 and var_err < 0.02 and elapsed < 30
    verdict(capsys, 2, "schedule and forward-process identities", ok,
            f"mean {mean_err:.2%} off, variance {var_err:.2%} off, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def test_03_gaussian_oracle_sampler(capsys):
    mu0, var0 = 0.3, 0.25
    schedule = make_schedule(200, 5e-4, 0.1)

    class Oracle:
        config = SimpleNamespace(in_channels=1, image_size=4)

        def tokenize(self, prompt):
            return np.zeros((1, 4), np.int64)

        def __call__(self, x, t, ids):
            # posterior mean of the noise when every pixel is N(mu0, var0)
            ab = schedule.alpha_bars[np.asarray(t) - 1]
            return ag.Tensor(np.sqrt(1 - ab) * (x - np.sqrt(ab) * mu0) / (ab * var0 + 1 - ab))

    start = time.process_time()
    with ag.default_dtype(np.float64):
        x = sample_loop(Oracle(), "any", schedule, RandomStream(0), count=10_000, batch_size=10_000, clamp=False)
    elapsed = time.process_time() - start
    ok = abs(x.mean() - mu0) <= 0.05 and abs(x.var() / var0 - 1) <= 0.10 and elapsed < 300
    verdict(capsys, 3, "Gaussian-oracle sampler", ok, f"mean {x.mean():.4f}, variance {x.var():.4f}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 4


def test_04_fid_correctness(capsys):
    start = time.process_time()
    one = frechet_distance(FeatureGaussian([0.0], [[1.0]], 10), FeatureGaussian([3.0], [[1.0]], 10))
    two = frechet_distance(FeatureGaussian([0, 0], np.diag([1.0, 4.0]), 10), FeatureGaussian([1, 1], np.diag([4.0, 1.0]), 10))
    analytic = abs(one - 9.0) <= 1e-9 and abs(two - 4.0) <= 1e-9
    rng = np.random.default_rng(7)
    worst_rel = worst_sym = 0.0
    self_zero = True
    for _ in range(1000):
        d = int(rng.integers(1, 17))
        s1, s2 = random_spd(rng, d), random_spd(rng, d)
        ref = oracle_sqrt_trace(s1, s2)
        worst_rel = max(worst_rel, abs(sqrt_trace(s1, s2) - ref) / ref)
        g1, g2 = FeatureGaussian(rng.normal(size=d), s1, 50), FeatureGaussian(rng.normal(size=d), s2, 50)
        worst_sym = max(worst_sym, abs(frechet_distance(g1, g2) - frechet_distance(g2, g1)))
        self_zero &= frechet_distance(g1, g1) == 0.0
    elapsed = time.process_time() - start
    ok = analytic and worst_rel < 1e-6 and worst_sym < 1e-8 and self_zero and elapsed < 60
    verdict(capsys, 4, "FID correctness", ok,
            f"oracle rel err {worst_rel:.1e}, asymmetry {worst_sym:.1e}, F(g,g)=0 {self_zero}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 5


def test_05_lora_contracts(capsys):
    start = time.process_time()
    vocab = TokenVocabulary.from_prompts([CHINESE, MODERN])
    model = Denoiser.fresh(tiny_config(), vocab, RandomStream(3))
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 1, 8, 8)).astype(np.float32)
    t = rng.integers(1, 21, 100)
    ids = model.tokenize([CHINESE, MODERN] * 50)
    base_out = model(x, t, ids).data

    ad = lora_init(model.params, 2, 2.0, stream=RandomStream(0))
    noop = np.abs(Denoiser(model.config, vocab, model.params, ad)(x, t, ids).data - base_out).max()
    for _, b in ad.entries.values():
        b.data = (0.1 * rng.normal(size=b.shape)).astype(np.float32)
    adapted = Denoiser(model.config, vocab, model.params, ad)(x, t, ids).data
    merged = Denoiser(model.config, vocab, lora_merge(model.params, ad))(x, t, ids).data
    merge_err = np.abs(adapted - merged).max()
    rank_ok = all(np.linalg.svd(ad.delta(n), compute_uv=False)[ad.rank:].max(initial=0.0)
                  < 1e-5 * np.linalg.svd(ad.delta(n), compute_uv=False)[0] for n in ad.targets)

    before = {k: p.data.copy() for k, p in model.params.items()}
    images = np.clip(rng.normal(size=(8, 1, 8, 8)), -1, 1).astype(np.float32)
    finetune_loop("lora", model, images, [CHINESE] * 8, FinetuneConfig("lora", steps=3, batch_size=4, lr=1e-2),
                  make_schedule(20, 1e-3, 0.2))
    frozen = all(before[k].tobytes() == model.params[k].data.tobytes() for k in before)
    elapsed = time.process_time() - start
    ok = noop < 1e-6 and merge_err < 1e-5 and rank_ok and frozen and elapsed < 60
    verdict(capsys, 5, "LoRA contracts", ok,
            f"no-op {noop:.1e}, merge {merge_err:.1e}, rank bound {rank_ok}, base frozen {frozen}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 6


def test_06_dreambooth_contracts(tmp_path, capsys):
    start = time.process_time()
    vocab = TokenVocabulary.from_prompts([CHINESE, MODERN, "a landscape painting"])
    model = Denoiser.fresh(tiny_config(), vocab, RandomStream(3))
    schedule = make_schedule(20, 1e-3, 0.2)
    rng = np.random.default_rng(2)
    inst = np.clip(rng.normal(size=(4, 1, 8, 8)), -1, 1).astype(np.float32)
    prior = np.clip(rng.normal(size=(4, 1, 8, 8)), -1, 1).astype(np.float32)
    iid, pid = model.tokenize(["a [V] landscape painting"] * 4), model.tokenize(["a landscape painting"] * 4)
    s = RandomStream(5)
    zero = dreambooth_loss(inst, iid, prior, pid, model, schedule, DreamBoothConfig(prior_weight=0.0), s)
    plain = training_loss(inst, iid, model, schedule, s.child(0), 0.0)
    reduction = float(zero.data) == float(plain.data)
    arithmetic = prior_preservation_total(0.2, 0.4, 1.0) == 0.2 + 0.4

    try:
        finetune_loop("dreambooth", model, inst, [CHINESE] * 4, FinetuneConfig("dreambooth", steps=1, batch_size=2), schedule)
        train_refused = False
    except ValueError as exc:
        train_refused = "identifier" in str(exc)
    try:
        fid_protocol(model, CHINESE, inst, None, schedule, RandomStream(0), required_identifier="[V]")
        eval_refused = False
    except ValueError as exc:
        eval_refused = "identifier" in str(exc)
    elapsed = time.process_time() - start
    ok = reduction and arithmetic and train_refused and eval_refused and elapsed < 60
    verdict(capsys, 6, "DreamBooth contracts", ok,
            f"lambda=0 exact {reduction}, 0.2+0.4 exact {arithmetic}, training refused {train_refused}, "
            f"evaluation refused {eval_refused}")


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_07_toy_fid_comparison(tmp_path, capsys):
    start = time.time()
    env = {**os.environ, "PYTHONPATH": str(ROOT / "src")}
    proc = subprocess.run(["bash", str(ROOT / "scripts" / "toy_fid_comparison.sh"), str(tmp_path / "toy")],
                          env=env, capture_output=True, text=True)
    elapsed = time.time() - start
    if proc.returncode != 0:
        verdict(capsys, 7, "toy FID comparison", False, f"pipeline exited {proc.returncode}: {proc.stderr[-500:]}")
    means = {k: json.loads((tmp_path / "toy" / f"eval_{k}.json").read_text())["mean"]
             for k in ("pretrained", "dreambooth", "lora")}
    pre = means["pretrained"]
    db_gain, lora_gain = 1 - means["dreambooth"] / pre, 1 - means["lora"] / pre
    ok = db_gain >= 0.2 and lora_gain >= 0.2 and elapsed < 45 * 60
    detail = (f"pretrained {pre:.2f}, dreambooth {means['dreambooth']:.2f} ({db_gain:.0%} lower), "
              f"lora {means['lora']:.2f} ({lora_gain:.0%} lower), dreambooth < lora "
              f"{means['dreambooth'] < means['lora']}, {elapsed / 60:.1f} min")
    verdict(capsys, 7, "toy FID comparison", ok, detail, (tmp_path / "toy" / "report.md").read_text())


# ---------------------------------------------------------------- 8


def test_08_protocol_fidelity(tmp_path, capsys):
    sig = inspect.signature(fid_protocol)
    m = synth_generate(190, 610, 16, 0, tmp_path / "data")
    a, _ = m.load_images("chinese")
    b, _ = m.load_images("modern")
    labels = np.array([0] * len(a) + [1] * len(b))
    extractor = train_classifier(np.concatenate([a, b]), labels, ClassifierConfig(image_size=16))

    class Flat:
        config = SimpleNamespace(in_channels=1, image_size=16)

        def tokenize(self, prompt):
            return np.zeros((1, 4), np.int64)

        def __call__(self, x, t, ids):
            return ag.Tensor(np.zeros_like(x))

    report = fid_protocol(Flat(), CHINESE, a, extractor, make_schedule(5, 0.1, 0.5), RandomStream(0))
    defaults = sig.parameters["repeats"].default == 10 and report.repeats == 10 and len(report.fids) == 10
    stats = report.mean == pytest.approx(np.mean(report.fids)) and report.std == pytest.approx(np.std(report.fids, ddof=1))

    def draw(pool):
        return lambda s, n: pool[s.integers(len(pool), n)]

    fa = extractor.features(a)
    same = np.mean(fid_repeats(draw(a), fa, extractor, 10, 256, RandomStream(1)))
    cross = np.mean(fid_repeats(draw(b), fa, extractor, 10, 256, RandomStream(1)))
    ok = defaults and stats and same < 0.05 * cross
    verdict(capsys, 8, "protocol fidelity", ok,
            f"{report.repeats} repeats by default, same-class FID {same:.4f} vs cross-class {cross:.2f}")


# ---------------------------------------------------------------- 9


def test_09_rating_clustering(capsys):
    x = np.array(RATING_EXAMPLE, dtype=float)
    _, oracle = brute_force_kmeans(x, 3)
    got = cluster_ratings(x)
    matches = np.allclose(got.centers, oracle, atol=1e-12) and np.allclose(got.centers, [31 / 30, 5.0, 9.0])
    k_default = inspect.signature(cluster_ratings).parameters["k"].default == 3
    try:
        cluster_ratings(list(RATING_EXAMPLE[:8]) + [10.5])
        validated = False
    except ValueError:
        validated = True
    verdict(capsys, 9, "rating clustering", matches and k_default and validated,
            f"centers {[round(c, 4) for c in got.centers]}, brute force {[round(c, 4) for c in oracle]}")


# ---------------------------------------------------------------- 10


def test_10_determinism_and_serialization(tmp_path, capsys):
    first = mini_pipeline(tmp_path / "one")
    second = mini_pipeline(tmp_path / "two")
    artifacts = ["base.ckpt", "ext.ckpt", "lora.ckpt", "db.ckpt", "pre.json", "lora.json", "db.json", "report.md"]
    identical = all(first[k].read_bytes() == second[k].read_bytes() for k in artifacts)

    rng = np.random.default_rng(3)
    params = {f"p{i}": rng.normal(size=(i + 1, 3)).astype(np.float32) for i in range(10)}
    save_checkpoint(tmp_path / "m.ckpt", params, {"kind": "denoiser"})
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    round_trip = all(loaded[k].tobytes() == params[k].tobytes() for k in params)

    raw = (tmp_path / "m.ckpt").read_bytes()
    rejected = 0
    for bad in (raw[: len(raw) - 7], raw[:20], b"PDIF0" + raw[5:]):
        (tmp_path / "bad.ckpt").write_bytes(bad)
        try:
            load_checkpoint(tmp_path / "bad.ckpt")
        except CheckpointError:
            rejected += 1
    ok = identical and round_trip and rejected == 3
    verdict(capsys, 10, "determinism and serialization", ok,
            f"two runs byte-identical {identical}, round trip {round_trip}, {rejected}/3 corruptions rejected")
