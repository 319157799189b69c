"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the run. The two training
experiments (criteria 7 and 8) run real models on the 200-clip synthetic set
and take several minutes.
"""

import math
import time
from decimal import Decimal

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

import oracles
from anticomp.compression import compress_frame, compress_pixels
from anticomp.config import DESK_SCALE, Config
from anticomp.core import RAW, FrameImage, normalize
from anticomp.data import FrameStore, SynthConfig, iterate_epoch, synth_toy_dataset
from anticomp.eval import ABLATION_PRESETS, EvalReport, EvalSpec, compare_runs, evaluate, percent, run_ablation_matrix
from anticomp.losses import (
    gan_baseline_losses,
    gan_generator_loss,
    l1_baseline_loss,
    relation_distribution,
    relation_loss,
    shannon_entropy,
    supervised_ce_loss,
    video_contrastive_loss,
)
from anticomp.memory import MemoryBank
from anticomp.model import Discriminator, ModelBundle, momentum_update
from anticomp.train import init_state, load_train_state, run_training, save_train_state, select_compression_views, train_step

D64 = torch.float64


def gaussian(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


def flat(params):
    return torch.cat([p.detach().reshape(-1) for p in params])


# --- 1 ------------------------------------------------------------------------------


@pytest.mark.criterion(1, "loss oracle equivalence")
def test_loss_oracles(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 65))
        z_w, z_s, anchors = gaussian(rng, 8), gaussian(rng, 8), gaussian(rng, k, 8)

        p_w = relation_distribution(z_w, anchors, 0.04)
        p_s = relation_distribution(z_s, anchors, 0.1)
        ref_w = oracles.softmax_of_similarities(z_w.tolist(), anchors.tolist(), 0.04)
        ref_s = oracles.softmax_of_similarities(z_s.tolist(), anchors.tolist(), 0.1)
        worst = max(worst, float(np.max(np.abs(p_w.numpy() - ref_w))), float(np.max(np.abs(p_s.numpy() - ref_s))))
        worst = max(worst, abs(relation_loss(p_w, p_s).item() - oracles.cross_entropy(ref_w, ref_s)))

        positive = gaussian(rng, 8)
        con = video_contrastive_loss(z_w, positive, anchors, 0.07).item()
        worst = max(worst, abs(con - oracles.info_nce(z_w.tolist(), positive.tolist(), anchors.tolist(), 0.07)))

        lw, ls, label = gaussian(rng, 2), gaussian(rng, 2), int(rng.integers(0, 2))
        ce = supervised_ce_loss(lw, ls, torch.tensor(label)).item()
        worst = max(worst, abs(ce - oracles.supervised_ce(lw.tolist(), ls.tolist(), label)))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max |diff| {worst:.2e} over 100 instances in {elapsed:.2f}s")
    assert worst < 1e-10
    assert elapsed < 10


# --- 2 ------------------------------------------------------------------------------


@pytest.mark.criterion(2, "gradient checks and stop-gradient paths")
def test_gradients(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(7)

    def check(fn, *inputs):
        inputs = [x.requires_grad_() for x in inputs]
        assert gradcheck(fn, inputs, eps=1e-5, atol=1e-8, rtol=1e-3)

    anchors = gaussian(rng, 32, 8)
    p_w = relation_distribution(gaussian(rng, 4, 8), anchors, 0.04)
    check(lambda zs: relation_loss(p_w, relation_distribution(zs, anchors, 0.1)), gaussian(rng, 4, 8))
    positive, negatives = gaussian(rng, 4, 8), gaussian(rng, 16, 8)
    check(lambda z: video_contrastive_loss(z, positive, negatives, 0.07), gaussian(rng, 4, 8))
    labels = torch.tensor([0, 1, 1, 0])
    check(lambda lw, ls: supervised_ce_loss(lw, ls, labels), gaussian(rng, 4, 2), gaussian(rng, 4, 2))
    check(l1_baseline_loss, gaussian(rng, 4, 8), gaussian(rng, 4, 8))
    torch.manual_seed(0)
    disc = Discriminator(8).double()
    check(lambda zs: gan_generator_loss(zs, disc), gaussian(rng, 4, 8))

    # weak relation input and the momentum positive carry no gradient
    z_w, z_s = gaussian(rng, 4, 8).requires_grad_(), gaussian(rng, 4, 8).requires_grad_()
    loss = relation_loss(relation_distribution(z_w, anchors, 0.04), relation_distribution(z_s, anchors, 0.1))
    g_w, _ = torch.autograd.grad(loss, [z_w, z_s], allow_unused=True)
    assert g_w is None or torch.count_nonzero(g_w) == 0
    z, z_pos = gaussian(rng, 4, 8).requires_grad_(), gaussian(rng, 4, 8).requires_grad_()
    _, g_pos = torch.autograd.grad(video_contrastive_loss(z, z_pos, negatives), [z, z_pos], allow_unused=True)
    assert g_pos is None or torch.count_nonzero(g_pos) == 0
    # discriminator step leaves the encoder untouched
    encoder = torch.nn.Linear(8, 8).double()
    x = gaussian(rng, 4, 8)
    d_loss, _ = gan_baseline_losses(encoder(x), encoder(x + 1), disc)
    d_loss.backward()
    assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in encoder.parameters())
    elapsed = time.perf_counter() - start
    record_property("detail", f"5 losses gradchecked, 3 stop-gradient paths exactly zero, {elapsed:.2f}s")
    assert elapsed < 30


# --- 3 ------------------------------------------------------------------------------


@pytest.mark.criterion(3, "momentum EMA closed form")
def test_momentum_closed_form(record_property):
    torch.manual_seed(3)
    bundle = ModelBundle(embed_dim=32).double()
    with torch.no_grad():
        for p in bundle.online_parameters():
            p.add_(torch.randn_like(p))
    p0 = [p.clone() for p in bundle.momentum_parameters()]
    target = [p.clone() for p in list(bundle.encoder.parameters()) + list(bundle.projector.parameters())]
    worst = 0.0
    for k in range(1, 21):
        momentum_update(bundle, 0.999)
        for start, p, pm in zip(p0, target, bundle.momentum_parameters()):
            worst = max(worst, (pm - oracles.ema_closed_form(start, p, 0.999, k)).abs().max().item())
    record_property("detail", f"max |diff| {worst:.2e} for k<=20")
    assert worst <= 1e-6


# --- 4 ------------------------------------------------------------------------------


@pytest.mark.criterion(4, "FIFO memory banks")
def test_fifo_banks(record_property):
    rng = np.random.default_rng(4)
    worst_norm = 0.0
    for _ in range(1000):
        capacity = int(rng.integers(1, 16))
        bank = MemoryBank(capacity, 4, D64)
        pushed = []
        for n in rng.integers(0, 2 * capacity + 2, size=int(rng.integers(1, 8))):
            batch = gaussian(rng, int(n), 4)
            bank.push(batch)
            pushed.extend(normalize(batch))
        expected = oracles.fifo_oracle(pushed, capacity)
        snap = bank.snapshot()
        assert len(snap) == len(expected)
        assert all(torch.equal(a, b) for a, b in zip(snap, expected))
        if len(snap):
            worst_norm = max(worst_norm, (snap.norm(dim=1) - 1).abs().max().item())
    record_property("detail", f"1000 sequences exact; max |norm-1| {worst_norm:.1e}")
    assert worst_norm <= 1e-5


# --- 5 ------------------------------------------------------------------------------


@pytest.mark.criterion(5, "temperature sharpening")
def test_temperature_sharpening(record_property):
    rng = np.random.default_rng(5)
    margins = []
    for _ in range(100):
        sims = rng.uniform(-1, 1, size=int(rng.integers(2, 65)))
        assert len(np.unique(sims)) == len(sims)
        h = {tau: shannon_entropy(torch.softmax(torch.from_numpy(sims) / tau, 0)).item() for tau in (0.04, 0.1)}
        margins.append(h[0.1] - h[0.04])
    record_property("detail", f"min H(0.1)-H(0.04) = {min(margins):.3e}")
    assert min(margins) > 0


# --- 6 ------------------------------------------------------------------------------


def textured_frames(n=20, size=64, seed=6):
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n):
        base = gaussian_filter(rng.random((size, size, 3)), sigma=(2, 2, 0))
        base = (base - base.min()) / (base.max() - base.min())
        frames.append(np.clip(0.7 * base + 0.15 + 0.15 * rng.standard_normal((size, size, 3)), 0, 1))
    return frames


@pytest.mark.criterion(6, "compression sanity")
def test_compression_sanity(record_property):
    frames = textured_frames()
    raw = FrameImage(frames[0])
    assert compress_frame(raw, RAW) is raw
    mse = {q: float(np.mean([np.mean((compress_pixels(f, q) - f) ** 2) for f in frames])) for q in (25, 80)}
    assert mse[25] >= mse[80]
    spread, weak_error, strong_error = 0.0, 0.0, 0.0
    for value in np.linspace(0, 1, 52):
        for q in (1, 10, 25, 50, 80, 100):
            out = compress_pixels(np.full((32, 32, 3), value), q)
            spread = max(spread, float(out.max() - out.min()))
        weak_error = max(weak_error, float(np.abs(compress_pixels(np.full((32, 32, 3), value), 80) - value).max()))
        strong_error = max(strong_error, float(np.abs(compress_pixels(np.full((32, 32, 3), value), 25) - value).max()))
    record_property(
        "detail",
        f"MSE q25 {mse[25]:.2e} >= q80 {mse[80]:.2e}; constant frames stay uniform within {spread * 255:.2f}/255 "
        f"at every quality; level shift {weak_error * 255:.2f}/255 at q80, {strong_error * 255:.2f}/255 at q25",
    )
    assert spread <= 1 / 255
    assert weak_error <= 1 / 255


# --- 7 and 8: training experiments --------------------------------------------------


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance") / "toy"
    manifests = synth_toy_dataset(root, SynthConfig(n_clips=200, frames_per_clip=8, frame_size=64), seed=0)
    return manifests, FrameStore()


def train_and_test(toy, tmp_path, **overrides):
    manifests, store = toy
    cfg = Config().with_overrides({**DESK_SCALE, **overrides})
    run = run_training(cfg, manifests, run_dir=tmp_path / cfg.digest(), store=store)
    spec = EvalSpec(["weak", "strong"], branch=run.eval_branch)
    return evaluate(run.best_checkpoint, manifests["test"], spec, store, cfg)


@pytest.mark.criterion(7, "degradation under single-weak training")
def test_degradation_reproduction(toy, tmp_path, record_property):
    start = time.perf_counter()
    reports = [
        train_and_test(toy, tmp_path, **{"train.strategy": "ce_only", "train.compression_mode": "single_weak", "train.seed": s})
        for s in range(3)
    ]
    elapsed = time.perf_counter() - start
    weak = float(np.mean([r["weak"] for r in reports]))
    strong = float(np.mean([r["strong"] for r in reports]))
    record_property("detail", f"WEAK {weak:.3f} vs STRONG {strong:.3f} (gap {100 * (weak - strong):.1f}pp), {elapsed:.0f}s")
    assert weak - strong >= 0.05
    assert elapsed <= 600


@pytest.mark.criterion(8, "method benefit under mixed training")
def test_method_benefit(toy, tmp_path, record_property):
    start = time.perf_counter()
    results = {}
    for strategy in ("ce_only", "proposed"):
        reports = [
            train_and_test(toy, tmp_path, **{"train.strategy": strategy, "train.compression_mode": "mixed", "train.seed": s})
            for s in range(3)
        ]
        results[strategy] = {lv: float(np.mean([r[lv] for r in reports])) for lv in ("weak", "strong")}
    elapsed = time.perf_counter() - start
    ce, ours = results["ce_only"], results["proposed"]
    record_property(
        "detail",
        f"STRONG proposed {ours['strong']:.3f} vs ce_only {ce['strong']:.3f}; "
        f"WEAK proposed {ours['weak']:.3f} vs ce_only {ce['weak']:.3f}; {elapsed:.0f}s",
    )
    assert ours["strong"] - ce["strong"] > 0
    assert ours["weak"] >= ce["weak"] - 0.01
    assert elapsed <= 1800


# --- 9 ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_tiny")
    return synth_toy_dataset(root, SynthConfig(n_clips=24, frames_per_clip=3, frame_size=16), seed=0), FrameStore()


def small_config(**overrides) -> Config:
    return Config().with_overrides(
        {
            "model.channel_widths": [4, 8],
            "model.embed_dim": 16,
            "model.predictor_hidden": 8,
            "data.frame_size": 16,
            "train.batch_size": 6,
            "train.epochs": 1,
            **overrides,
        }
    )


@pytest.mark.criterion(9, "ablation machinery")
def test_ablation_machinery(tiny, tmp_path, record_property):
    manifests, store = tiny
    test_frames = manifests["test"].num_frames
    counts = {}
    for preset in ("table4", "table5"):
        cells = run_ablation_matrix(small_config(), manifests, preset, run_root=tmp_path)
        assert [c.name for c in cells] == [name for name, _ in ABLATION_PRESETS[preset]]
        for cell in cells:
            assert cell.error is None, cell.error
            again = EvalReport.load(tmp_path / f"ablate-{preset}" / cell.name / "eval_test.json")
            assert list(again.accuracy) == ["weak", "strong", "raw", "75", "50", "20", "10"]
            assert all(0.0 <= v <= 1.0 for v in again.accuracy.values()) and again.n_frames == test_frames
        counts[preset] = len(cells)
    sizes = [c.config.memory.capacity for c in cells]
    assert sizes == [256, 1024, 4096, 16384, 32768]

    # the zero-weight cell takes exactly the pure-CE first step
    cells = dict(ABLATION_PRESETS["table4"])
    zero = small_config(**{"train.dtype": "float64", **cells["ce+momentum"]})
    ce = small_config(**{"train.dtype": "float64", **cells["ce"]})
    batch = next(iter(iterate_epoch(manifests["train"], store, 0, 0, 6, select_compression_views("mixed"))))
    a, _ = train_step(init_state(zero), batch, zero)
    b, _ = train_step(init_state(ce), batch, ce)
    diff = (flat(a.bundle.online_parameters()) - flat(b.bundle.online_parameters())).abs().max().item()
    record_property("detail", f"table4 {counts['table4']} runs, table5 {counts['table5']} runs; zero-weight step diff {diff:.1e}")
    assert diff <= 1e-7


# --- 10 -----------------------------------------------------------------------------


@pytest.mark.criterion(10, "determinism and checkpoint round-trip")
def test_determinism_and_resume(tiny, tmp_path, record_property):
    manifests, store = tiny
    cfg = small_config(**{"train.dtype": "float64", "memory.capacity": 32})
    views = select_compression_views(cfg.train.compression_mode)

    def batches():
        epoch = 0
        while True:
            yield from iterate_epoch(manifests["train"], store, cfg.train.seed, epoch, cfg.train.batch_size, views)
            epoch += 1

    def fifty():
        state, out = init_state(cfg), []
        for _, batch in zip(range(50), batches()):
            state, report = train_step(state, batch, cfg)
            out.append(report.to_dict())
        return out

    first, second = fifty(), fifty()
    drift = max(abs(a[k] - b[k]) for a, b in zip(first, second) for k in a)
    assert drift <= 1e-6

    stream = batches()
    state = init_state(cfg)
    for _ in range(3):
        state, _ = train_step(state, next(stream), cfg)
    save_train_state(tmp_path / "mid.pt", state, cfg)
    nxt = next(stream)
    _, straight = train_step(state, nxt, cfg)
    resumed, cfg2 = load_train_state(tmp_path / "mid.pt")
    _, again = train_step(resumed, nxt, cfg2)
    gap = max(abs(again.to_dict()[k] - v) for k, v in straight.to_dict().items())
    record_property("detail", f"50-step drift {drift:.1e}, resume gap {gap:.1e}")
    assert gap <= 1e-6


# --- 11 -----------------------------------------------------------------------------

# (weak %, strong %, published average %), three datasets x seven methods
PUBLISHED_ROWS = [
    ("98.89", "73.86", "86.38"), ("86.85", "94.21", "90.53"), ("99.42", "76.89", "88.16"),
    ("85.71", "94.46", "90.09"), ("97.58", "80.53", "89.06"), ("88.62", "94.71", "91.67"),
    ("95.70", "93.59", "94.65"), ("94.37", "82.98", "88.68"), ("76.69", "91.27", "83.98"),
    ("94.63", "81.28", "87.96"), ("77.16", "91.53", "84.35"), ("94.41", "84.70", "89.56"),
    ("76.69", "91.67", "84.18"), ("93.38", "87.48", "90.43"), ("93.07", "55.09", "74.08"),
    ("79.43", "84.49", "81.96"), ("94.25", "57.83", "76.04"), ("80.52", "84.83", "82.67"),
    ("92.87", "65.38", "79.13"), ("82.02", "84.90", "83.46"), ("90.70", "83.79", "87.26"),
]  # fmt: skip
# Rows whose printed average cannot come from their own cells under any
# rounding of the exact midpoint (82.675 and 87.245); see the ledger.
INCONSISTENT_ROWS = {17: "82.68", 20: "87.25"}


@pytest.mark.criterion(11, "comparison-table arithmetic")
def test_table_arithmetic(record_property):
    reports = [
        EvalReport({"weak": float(Decimal(w) / 100), "strong": float(Decimal(s) / 100)}, 1, 1, f"row{i}", EvalSpec(["weak", "strong"]))
        for i, (w, s, _) in enumerate(PUBLISHED_ROWS)
    ]
    table = compare_runs(reports)
    matched = 0
    for i, ((_, _, published), avg) in enumerate(zip(PUBLISHED_ROWS, table.avg)):
        expected = INCONSISTENT_ROWS.get(i, published)
        assert percent(avg) == Decimal(expected), (i, percent(avg), expected)
        matched += i not in INCONSISTENT_ROWS
    assert table.avg[6] == Decimal("0.94645") and percent(table.avg[6]) == Decimal("94.65")
    record_property("detail", f"{matched}/21 published averages reproduced exactly; rows 18 and 21 are off by 0.01 in the source")
    assert matched == len(PUBLISHED_ROWS) - len(INCONSISTENT_ROWS)
    assert math.isclose(float(table.avg[6]), 0.94645)
