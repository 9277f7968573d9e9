"""Acceptance suite: one test per criterion, each printing a PASS line.

The two training criteria share one session-scoped set of toy runs (a full
model plus the three ablations on the same 64-sample 2-sprite corpus).
Set SKETCHANIM_TOY_CACHE to a directory to reuse toy checkpoints across
invocations; without it the runs retrain from scratch (deterministic).
"""

import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from helpers import (
    gradient_check,
    jitter_parameters,
    micro_model,
    micro_prepared,
    micro_record,
    random_conditions,
)
from test_attention import random_sequence, scalar_per_instance_oracle
from test_canvas import compose_oracle, make_sprite

from sketchanim.attention import InstanceAwareAttention, TokenSequence
from sketchanim.backbone import (
    Denoiser,
    NoiseSchedule,
    load_checkpoint,
    predict_noise,
)
from sketchanim.canvas import CanvasSpec, InstanceSet, Placement, compose
from sketchanim.control import ConditionExperts, set_weights
from sketchanim.data_factory import read_manifest, write_corpus
from sketchanim.latent_codec import LatentVideo, PixelVideo, decode, encode
from sketchanim.metrics import (
    MetricReport,
    parse_report,
    render_report,
    ssim,
    temporal_consistency,
)
from sketchanim.training import (
    TrainConfig,
    color_accuracy,
    colorize_record,
    held_out_records,
    mean_frame_ssim,
    model_config_for_corpus,
    read_probe_log,
    swap_flip_rate,
    train,
)

TOY = dict(width=32, height=32, frames=4, sprites=2, corpus_size=64, heldout=16,
           steps=5000, lr=2e-5, hidden=128, blocks=2, heads=4, instance_px=16,
           sample_steps=50)


def ok(criterion: str, detail: str = ""):
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE PASS — {criterion}{suffix}")


# --------------------------------------------------------------------------
# toy training runs shared by the training and ablation criteria


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    cache = os.environ.get("SKETCHANIM_TOY_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("toy_runs")
    root.mkdir(parents=True, exist_ok=True)
    corpus = root / "corpus"
    if not (corpus / "manifest.json").exists():
        write_corpus(corpus, size=TOY["corpus_size"], seed=2024, width=TOY["width"],
                     height=TOY["height"], frames=TOY["frames"],
                     min_sprites=TOY["sprites"], max_sprites=TOY["sprites"])
    manifest = read_manifest(corpus)
    model_config = model_config_for_corpus(
        manifest, hidden_dim=TOY["hidden"], blocks=TOY["blocks"], heads=TOY["heads"],
        instance_px=TOY["instance_px"],
    )
    runs = {}
    for ablation in ("full", "no_instance_attention", "no_canvas_guidance",
                     "no_decoupled_control"):
        out = root / f"run_{ablation}"
        final = out / "model.pt"
        if not final.exists():
            config = TrainConfig(
                learning_rate=TOY["lr"], steps=TOY["steps"], seed=0,
                ablation=ablation, probe_every=100, checkpoint_every=0,
                log_every=50, probe_size=16,
            )
            final = train(config, corpus, out, model_config)
        runs[ablation] = {"checkpoint": final, "out": final.parent}
    records = held_out_records(seed=4242, count=TOY["heldout"], width=TOY["width"],
                               height=TOY["height"], frames=TOY["frames"])
    return {"runs": runs, "records": records, "corpus": corpus}


@pytest.fixture(scope="session")
def toy_generations(toy_runs):
    videos = {}
    for ablation, run in toy_runs["runs"].items():
        model, _ = load_checkpoint(run["checkpoint"])
        videos[ablation] = [
            colorize_record(model, record, seed=1000 + i, num_steps=TOY["sample_steps"])
            for i, record in enumerate(toy_runs["records"])
        ]
    return videos


# --------------------------------------------------------------------------


def test_codec_exactness():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        t = int(rng.integers(1, 5))
        h = 4 * int(rng.integers(1, 9))
        w = 4 * int(rng.integers(1, 9))
        video = PixelVideo(frames=rng.random((t, h, w, 3)))
        back = decode(encode(video))
        worst = max(worst, float(np.max(np.abs(back.frames - video.frames))))
    assert worst == 0.0
    ok("codec exactness", "decode(encode(v)) identity over 100 random videos, max err 0")


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_compose_oracle():
    rng = np.random.default_rng(2025)
    for trial in range(50):
        instances = InstanceSet(
            {f"s{i}": make_sprite(rng, size=int(rng.integers(2, 12))) for i in range(5)}
        )
        placements = [
            Placement(
                instance_id=f"s{rng.integers(5)}",
                x=int(rng.integers(-6, 28)),
                y=int(rng.integers(-6, 28)),
                scale=float(rng.choice([0.5, 0.75, 1.0, 1.5, 2.0, 3.1])),
                z_order=int(rng.integers(0, 4)),
            )
            for _ in range(int(rng.integers(0, 6)))
        ]
        spec = CanvasSpec(width=32, height=32, placements=placements)
        assert np.array_equal(compose(spec, instances), compose_oracle(spec, instances))
    ok("compose oracle", "50 random canvas specs equal the painter reference loop")


def test_attention_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(20):
        torch.manual_seed(trial)
        width = int(rng.choice([16, 32]))
        heads = int(rng.choice([2, 4]))
        module = InstanceAwareAttention(width, heads=heads)
        n = int(rng.integers(1, 4))
        groups = [int(rng.integers(1, 5)) for _ in range(n)]
        seq = random_sequence(rng, int(rng.integers(2, 8)), groups, width)
        out = module(seq, mode="per_instance").tokens.detach().numpy()
        oracle = scalar_per_instance_oracle(module, seq)
        worst = max(worst, float(np.max(np.abs(out - oracle))))
    assert worst < 1e-5
    ok("attention oracle", f"20 configs, worst |diff| {worst:.2e} < 1e-5")


@pytest.mark.parametrize("mode", ["unified", "per_instance"])
def test_mask_structure_gradient_blocking(mode):
    torch.manual_seed(100)
    module = InstanceAwareAttention(16, heads=2).double()
    rng = np.random.default_rng(100)
    seq = random_sequence(rng, 4, [3, 2, 2], 16, dtype=torch.float64)
    slices = seq.group_slices()
    base = module(seq, mode=mode).tokens.detach()
    h = 1e-4
    worst = 0.0
    for gi in range(3):
        for gj in range(3):
            if gi == gj:
                continue
            probe_pos = slices[gj].start
            bumped = seq.tokens.clone()
            bumped[probe_pos, 5] += h
            out = module(
                TokenSequence(bumped, seq.joint_len, seq.group_sizes), mode=mode
            ).tokens.detach()
            diff = (out[slices[gi]] - base[slices[gi]]).abs().max().item() / h
            worst = max(worst, diff)
    assert worst < 1e-7
    ok(f"mask structure [{mode}]",
       f"finite-difference cross-group gradient {worst:.1e} < 1e-7")


def test_loss_exclusion():
    from sketchanim.backbone import flatten_latent_tokens
    from sketchanim.training import masked_token_loss, sample_conditions

    model = micro_model(seed=300, dtype=torch.float64)
    jitter_parameters(model, seed=300)
    prep = micro_prepared(model, micro_record(seed=300, sprites=2))
    rng = np.random.default_rng(300)
    eps = rng.standard_normal(prep.x0.data.shape)
    x_t = model.schedule.add_noise(prep.x0, 11, eps)
    cond = sample_conditions(model, prep)
    result = model(model._as_tensor(x_t.data), 11, cond)
    assert len(result.group_sizes) == 2
    targets = torch.zeros_like(result.token_out)
    targets[: result.joint_len] = flatten_latent_tokens(
        model._as_tensor(eps), model.config.patch
    )
    mask = torch.zeros(result.token_out.shape[0], dtype=torch.bool)
    mask[: result.joint_len] = True
    base = float(masked_token_loss(result.token_out, targets, mask))
    perturbed = targets.clone()
    perturbed[result.joint_len :] = rng.standard_normal(
        perturbed[result.joint_len :].shape
    )
    after = float(masked_token_loss(result.token_out, perturbed, mask))
    assert after - base == 0.0
    ok("loss exclusion", "perturbing instance-token targets changes the loss by 0")


def test_permutation_invariance():
    model = micro_model(seed=400, dtype=torch.float64)
    jitter_parameters(model, seed=400)
    cond = random_conditions(model, seed=400, n_instances=3)
    x_t = np.random.default_rng(400).normal(size=(2, 2, 2, 48))
    base = predict_noise(model, LatentVideo(x_t), 7, cond).data
    worst = 0.0
    for order in ([1, 2, 0], [2, 1, 0], [0, 2, 1]):
        permuted = random_conditions(model, seed=400, n_instances=3)
        permuted.instance_latents = [cond.instance_latents[i] for i in order]
        permuted.bundle.instances = [cond.bundle.instances[i] for i in order]
        permuted.bundle.weights.instances = [
            cond.bundle.weights.instances[i] for i in order
        ]
        out = predict_noise(model, LatentVideo(x_t), 7, permuted).data
        worst = max(worst, float(np.max(np.abs(out - base))))
    assert worst < 1e-6
    ok("permutation invariance", f"joint outputs max |diff| {worst:.1e} < 1e-6")


def test_decoupled_control(micro_corpus, tmp_path):
    # linearity of the expert combination in the weight vector
    from test_control import make_bundle

    torch.manual_seed(500)
    experts = ConditionExperts(32, heads=4)
    rng = np.random.default_rng(500)
    hidden = torch.tensor(rng.normal(size=(6, 32)), dtype=torch.float32)
    base = make_bundle(rng, weights=(0.8, 0.4, [1.1, 0.6]))
    doubled = set_weights(base, {"bg": 1.6, "text": 0.8, "inst": {0: 2.2, 1: 1.2}})
    lin_err = float(torch.max(torch.abs(experts(hidden, doubled) - 2 * experts(hidden, base))))
    assert lin_err < 1e-6

    # zero weight decouples the condition's tokens
    muted = set_weights(base, {"text": 0})
    out_a = experts(hidden, muted)
    muted.text.tokens = muted.text.tokens + 5.0
    out_b = experts(hidden, muted)
    assert torch.max(torch.abs(out_a - out_b)).item() == 0.0

    # background weight bit-frozen across 500 optimizer steps
    from conftest import micro_model_config

    mc = micro_model_config(micro_corpus)
    torch.manual_seed(501)
    before = Denoiser(mc).weight_store.bg_weight.detach().clone()
    config = TrainConfig(learning_rate=1e-3, steps=500, seed=501, checkpoint_every=0,
                         log_every=100)
    final = train(config, micro_corpus, tmp_path / "freeze500", mc)
    model, _ = load_checkpoint(final)
    assert torch.equal(before, model.weight_store.bg_weight.detach())
    ok("decoupled control",
       f"linearity {lin_err:.1e} < 1e-6; zero-weight decoupling exact; "
       "bg weight bit-frozen across 500 steps")


def test_gradient_check():
    worst_overall = 0.0
    for seed in range(5):
        model = micro_model(seed=600 + seed, dtype=torch.float64)
        jitter_parameters(model, seed=600 + seed)
        prep = micro_prepared(model, micro_record(seed=600 + seed, sprites=2))
        rng = np.random.default_rng(600 + seed)
        eps = rng.standard_normal(prep.x0.data.shape)
        t = int(rng.integers(1, model.schedule.steps))
        worst = gradient_check(model, prep, t=t, eps=eps, coords_per_tensor=2,
                               seed=600 + seed)
        worst_overall = max(worst_overall, worst)
    assert worst_overall < 1e-4
    ok("gradient check", f"5 seeds, worst relative error {worst_overall:.2e} < 1e-4")


def test_noising_moments():
    sched = NoiseSchedule.linear(1000)
    rng = np.random.default_rng(321)
    x0 = LatentVideo(rng.random((1, 1, 1, 4)))
    draws = 10_000
    for t in (1, 500, 999):
        samples = np.stack(
            [
                sched.add_noise(x0, t, rng.standard_normal(x0.data.shape)).data
                for _ in range(draws)
            ]
        )
        ab = sched.alphas_cumprod[t]
        mean_se = math.sqrt((1 - ab) / draws)
        var_se = (1 - ab) * math.sqrt(2.0 / (draws - 1))
        mean_err = np.abs(samples.mean(axis=0) - math.sqrt(ab) * x0.data)
        var_err = np.abs(samples.var(axis=0, ddof=1) - (1 - ab))
        assert np.all(mean_err <= 3 * mean_se), f"mean off at t={t}"
        assert np.all(var_err <= 3 * var_se), f"variance off at t={t}"
    ok("noising moments", "mean and variance within 3 SE at t in {1, 500, 999}")


def test_toy_training(toy_runs, toy_generations):
    run = toy_runs["runs"]["full"]
    probe = dict(read_probe_log(run["out"]))
    baseline = probe[100]
    final = read_probe_log(run["out"])[-1][1]
    assert final <= 0.5 * baseline, f"loss {final} vs baseline {baseline}"

    records = toy_runs["records"]
    videos = toy_generations["full"]
    hits, total = color_accuracy(records, videos)
    rate = hits / total
    assert rate >= 0.9, f"color accuracy {hits}/{total}"

    model, _ = load_checkpoint(run["checkpoint"])
    swapped = [
        colorize_record(model, record, seed=1000 + i, num_steps=TOY["sample_steps"],
                        swap_pair=("inst_0", "inst_1"))
        for i, record in enumerate(records)
    ]
    flips, pairs = swap_flip_rate(records, videos, swapped)
    flip_rate = flips / pairs
    assert flip_rate >= 0.8, f"swap flips {flips}/{pairs}"
    ok("toy training",
       f"loss {final:.3f} <= half of step-100 baseline {baseline:.3f}; "
       f"color accuracy {hits}/{total}; swap flips {flips}/{pairs}")


def test_ablation_harness(toy_runs, toy_generations):
    records = toy_runs["records"]
    scores = {
        ablation: mean_frame_ssim(records, videos)
        for ablation, videos in toy_generations.items()
    }
    full = scores.pop("full")
    for ablation, score in scores.items():
        assert full >= score, f"full {full:.4f} < {ablation} {score:.4f}"
    ok("ablation harness",
       "full SSIM {:.4f} >= ".format(full)
       + ", ".join(f"{k} {v:.4f}" for k, v in scores.items()))


def test_metrics_criteria():
    rng = np.random.default_rng(800)
    x = rng.random((16, 16, 3))
    assert ssim(x, x) == 1.0
    constant = PixelVideo(frames=np.full((4, 16, 16, 3), 0.3))
    assert temporal_consistency(constant) == 1.0
    values = {"FID": 121.901, "SSIM": 0.681, "LPIPS": 0.201, "Temporal": 0.969,
              "CLIP": 0.921}
    parsed = parse_report(render_report(MetricReport(values=values)))
    assert all(parsed[k] == v for k, v in values.items())
    ok("metrics", "ssim(x,x)=1; temporal(constant)=1; report row round-trips losslessly")


def test_service_criteria(toy_runs):
    import base64
    import io

    from fastapi.testclient import TestClient
    from PIL import Image

    from sketchanim.server import create_app

    app = create_app(checkpoint_path=toy_runs["runs"]["full"]["checkpoint"])
    record = toy_runs["records"][0]

    def png_b64(arr):
        buf = io.BytesIO()
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(
            buf, format="PNG"
        )
        return base64.b64encode(buf.getvalue()).decode("ascii")

    sketches = [png_b64(f) for f in record.sketches.frames]
    with TestClient(app) as client:
        uploads = []
        for i in range(4):
            inst = record.instances[record.instances.ids[i % len(record.instances)]]
            content = np.where(inst.alpha()[..., None], inst.image, 0.0)
            buf = io.BytesIO()
            Image.fromarray(np.round(content * 255).astype(np.uint8)).save(buf, "PNG")
            response = client.post(
                "/instances", files={"file": ("i.png", buf.getvalue(), "image/png")}
            )
            uploads.append(response.json()["instance_id"])

        # determinism per seed
        placements = [
            {"instance_id": uploads[0], "x": 4, "y": 4, "scale": 1.0, "z_order": 0},
            {"instance_id": uploads[1], "x": 18, "y": 16, "scale": 1.0, "z_order": 1},
        ]
        payload = {
            "canvas": {"width": 32, "height": 32, "background_path": None,
                       "placements": placements},
            "sketches": sketches,
            "caption": record.caption,
            "seed": 9,
            "steps": 8,
        }
        first = client.post("/infer", json=payload)
        second = client.post("/infer", json=payload)
        assert first.status_code == 200
        assert first.json()["frames"] == second.json()["frames"]

        # arbitrary instance count against a model trained with N=2
        for n in range(5):
            n_placements = [
                {"instance_id": uploads[i], "x": 2 + 6 * i, "y": 2 + 5 * i,
                 "scale": 1.0, "z_order": i}
                for i in range(n)
            ]
            response = client.post(
                "/infer",
                json={**payload, "canvas": {**payload["canvas"],
                                            "placements": n_placements},
                      "steps": 4},
            )
            assert response.status_code == 200, f"N={n}: {response.text}"
            assert response.json()["instance_groups"] == n
    ok("service", "deterministic /infer; N in {0..4} accepted on an N=2-trained model")


def test_primary_suite_independent_of_secondary():
    # the primary package must not import anything from the frontend build
    import sketchanim

    pkg_root = Path(sketchanim.__file__).parent
    offenders = [
        p for p in pkg_root.rglob("*.py") if "frontend" in p.read_text()
    ]
    assert offenders == []
    ok("primary standalone", "primary package has no dependency on the studio build")
