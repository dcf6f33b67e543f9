"""The ten acceptance criteria, each at its stated tolerance and time budget."""

import math
import time

import numpy as np
import pytest
import torch
from torch import nn

from causalve.anim import AudioEncoder, FaceModel3D, anim_losses, kl_standard_normal, sample_motion
from causalve.config import PipelineConfig, lr_at
from causalve.decision import (DecisionTrace, ce_margin_loss, fb_loss, handover, margin,
                               prediction_loss, total_decision_loss)
from causalve.diffusion import (MaskSchedule, NoiseSchedule, TinyDenoiser, ToyEmbedder, blended_step,
                                cover_image_loss, denoised_estimate, mask_at, q_sample)
from causalve.hiding import CouplingNet, HidingConfig, cf_weights, hide_forward, hiding_loss, recover_backward
from causalve.metrics import psnr
from causalve.pipeline import load_models, recover_pipeline, run_pipeline
from causalve.steganalysis import fusion_score, lsb4_hide, lsb4_recover, roc, to_uint8
from causalve.synthetic import natural_clip
from causalve.training import face_dataset, natural_stacks, train_stage
from causalve.vist import MultiHeadAttention, ShiftedBlock, shifted_block, shifted_window_attention
from causalve.wavelet import band_pack, band_unpack, dwt2, idwt2, pack_bands, unpack_bands

from conftest import check_grads
from test_vist import shifted_oracle

# desk-scale hide training used for criterion 4
HIDE_STEPS = 3000
HIDE_HALVE_EVERY = 1500
HIDE_CLIPS = 16


def randomized(net, seed):
    torch.manual_seed(seed)
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            m.reset_parameters()
    return net


def test_c01_inversion(verdict):
    t0 = time.perf_counter()
    worst = {torch.float32: 0.0, torch.float64: 0.0}
    for seed in range(100):
        net = randomized(CouplingNet(HidingConfig(channels=8, n_blocks=4, hidden=16, growth=8)), seed)
        g = torch.Generator().manual_seed(seed)
        c, s = torch.rand(2, 1, 8, 16, 16, generator=g)
        for dtype in worst:
            net.to(dtype)
            with torch.no_grad():
                stego, res = hide_forward(c.to(dtype), s.to(dtype), net)
                rs, rc = recover_backward(stego, res, net)
            err = max(float((rs - s.to(dtype)).abs().max()), float((rc - c.to(dtype)).abs().max()))
            worst[dtype] = max(worst[dtype], err)
    secs = time.perf_counter() - t0
    ok = worst[torch.float32] <= 1e-4 and worst[torch.float64] <= 1e-8 and secs < 30
    verdict(1, "inversion", ok, f"float32 {worst[torch.float32]:.2e} <= 1e-4, "
            f"float64 {worst[torch.float64]:.2e} <= 1e-8, {secs:.1f}s < 30s")


def test_c02_dwt(verdict):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    frames = torch.rand(1000, 3, 32, 32, generator=g, dtype=torch.float64)
    bands = dwt2(frames)
    recon = float((idwt2(*bands) - frames).abs().max())
    e_in = frames.pow(2).sum((1, 2, 3))
    e_out = sum(b.pow(2).sum((1, 2, 3)) for b in bands)
    energy = float(((e_out - e_in).abs() / e_in).max())
    groups = frames.reshape(250, 4, 3, 32, 32)
    stack = band_pack(groups)
    raw = torch.rand(250, 4, 4, 3, 16, 16, generator=g)
    bijective = (torch.equal(unpack_bands(pack_bands(raw), 4, 3), raw)
                 and torch.equal(pack_bands(unpack_bands(stack, 4, 3)), stack))
    group_err = float((band_unpack(stack, 4, 3) - groups).abs().max())
    secs = time.perf_counter() - t0
    ok = recon <= 1e-6 and energy <= 1e-5 and bijective and group_err <= 1e-6 and secs < 10
    verdict(2, "DWT", ok, f"reconstruction {recon:.1e}, energy {energy:.1e} relative, "
            f"pack/unpack exact={bijective}, {secs:.2f}s < 10s")


def test_c03_lsb_baseline(verdict):
    clips = [natural_clip(1000 + i).frames for i in range(50)]
    vals = [psnr(clips[i], lsb4_hide(clips[i], clips[(i + 1) % 50])) for i in range(50)]
    c, s = np.meshgrid(np.arange(256, dtype=np.uint8), np.arange(256, dtype=np.uint8))
    stego = lsb4_hide(c, s)
    exact = np.array_equal(lsb4_recover(stego), s & 0xF0) and np.array_equal(stego >> 4, c >> 4)
    mean = float(np.mean(vals))
    verdict(3, "4-bit LSB", 31 <= mean <= 34 and exact,
            f"mean cover/stego PSNR {mean:.2f} dB in [31, 34], nibble-exact over 256x256={exact}")


@pytest.mark.slow
def test_c04_trained_hide(verdict, tmp_path):
    cfg = PipelineConfig()
    cfg.train.halve_every = HIDE_HALVE_EVERY
    cfg.data.clips = HIDE_CLIPS
    t0 = time.perf_counter()
    res = train_stage("hide", cfg, steps=HIDE_STEPS, checkpoint_dir=tmp_path)
    secs = time.perf_counter() - t0
    net = res.model.eval()
    stacks, _ = natural_stacks(cfg, 8, seed_offset=1000)     # held-out clips
    cover, secret = stacks, stacks.roll(1, 0)
    with torch.no_grad():
        stego, residual = hide_forward(cover, secret, net)
        attach, _ = recover_backward(stego, residual, net)
        discard, _ = recover_backward(stego, torch.zeros_like(residual), net)
    cs, sa, sd = psnr(cover, stego), psnr(secret, attach), psnr(secret, discard)
    ok = HIDE_STEPS <= 5000 and cs > 30 and sa > 30 and secs < 1800
    verdict(4, "trained hide", ok, f"{HIDE_STEPS} steps in {secs:.0f}s < 1800s, cover/stego {cs:.2f} dB > 30, "
            f"recovery attach {sa:.1f} dB > 30, discard {sd:.2f} dB (measured)")


def test_c05_steganalysis(verdict):
    t0 = time.perf_counter()
    frames = [to_uint8(natural_clip(5000 + i, 1).frames[0]) for i in range(1000)]
    covers, others = frames[0::2], frames[1::2]
    cover_scores = [fusion_score(f) for f in covers]
    other_scores = [fusion_score(f) for f in others]
    stego_scores = [fusion_score(lsb4_hide(c, s, key=j)) for j, (c, s) in enumerate(zip(covers, others))]
    auc_lsb = roc(stego_scores, cover_scores).auc
    auc_cc = roc(other_scores, cover_scores).auc
    secs = time.perf_counter() - t0
    ok = auc_lsb > 0.9 and 0.45 <= auc_cc <= 0.55 and secs < 300
    verdict(5, "steganalysis", ok, f"LSB vs cover AUC {auc_lsb:.3f} > 0.9, cover vs cover AUC "
            f"{auc_cc:.3f} in [0.45, 0.55], {secs:.0f}s < 300s")


def test_c06_gradient_checks(verdict):
    errs = {}

    net = randomized(CouplingNet(HidingConfig(channels=8, n_blocks=1, hidden=3, growth=2)), 3)
    c, s = torch.rand(2, 1, 8, 4, 4, dtype=torch.float64)
    cf = cf_weights(1)

    def vh_loss():
        stego, res = net(c, s)
        rs, rc = net.inverse(stego, torch.zeros_like(res))
        return hiding_loss(stego, c, rs, s, rc, cf, 2.0, channels=2)[0]

    errs["coupling block / L_VH"] = check_grads(net, vh_loss)

    sched = NoiseSchedule.linear(100, 1e-4, 2e-2)
    den = TinyDenoiser(channels=3, hidden=4)
    den.film = nn.Linear(16, 8)
    emb = ToyEmbedder(grid=4)
    x0, noise = torch.rand(1, 3, 8, 8, dtype=torch.float64), torch.randn(1, 3, 8, 8, dtype=torch.float64)
    x_t = q_sample(x0, 30, noise, sched)
    id_src = emb(torch.rand(1, 3, 8, 8, dtype=torch.float64))

    def cover_loss():
        pred = den(x_t, 30, id_src)
        return cover_image_loss(pred, noise, id_src, emb(denoised_estimate(x_t, 30, pred, sched)))

    errs["toy denoiser / cover loss"] = check_grads(den, cover_loss)

    block = ShiftedBlock(8, 2, (2, 2, 2), (1, 1, 1), layer_index=1, mlp_ratio=1.0)
    z, target = torch.randn(2, 4, 8, 4, 4, dtype=torch.float64)
    errs["shifted attention block"] = check_grads(block, lambda: ((shifted_block(z, block) - target) ** 2).mean())

    torch.manual_seed(0)
    enc = AudioEncoder(FaceModel3D(seed=0), n_mel=4, latent=2, channels=4, cond=4, hidden=6)
    g = torch.Generator().manual_seed(0)
    audio = torch.randn(4, 4, generator=g, dtype=torch.float64)
    lip, blink = torch.rand(2, 4, generator=g, dtype=torch.float64)
    pose = torch.rand(4, 3, generator=g, dtype=torch.float64)
    rho0 = torch.tensor([0.0, 16.0, 16.0], dtype=torch.float64)

    def anim_loss():
        state = sample_motion(enc, audio, torch.zeros(8, dtype=torch.float64), rho0, blink, seed=1)
        return anim_losses(state, lip, blink, pose, (32, 32))[0]

    errs["anim loss heads"] = check_grads(enc, anim_loss)
    worst = max(errs.values())
    verdict(6, "gradient checks", worst <= 1e-3,
            ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (all <= 1e-3 relative)")


def test_c07_formulas(verdict):
    ms = MaskSchedule(torch.ones(1, 4, 4), 100, 50)
    phi, lam = (lambda x, t: torch.zeros_like(x)), (lambda x, t: torch.ones_like(x))
    half = MaskSchedule(torch.full((1, 4, 4), 0.5 * 50 / 40), 100, 50)   # U_60 = 0.5
    x = torch.rand(1, 4, 4, dtype=torch.float64)
    checks = {
        "mask t=100": (float(mask_at(ms, 100).max()), 0.0),
        "mask t=60": (float(mask_at(ms, 60).max()), 0.8),
        "mask t=25": (float(mask_at(ms, 25).max()), 1.0),
        "blend U=0": (float(blended_step(x, 100, phi, lam, ms).max()), 0.0),
        "blend U=1": (float(blended_step(x, 10, phi, lam, ms).min()), 1.0),
        "blend U=0.5": (float(blended_step(x, 60, phi, lam, half).mean()), 0.5),
        "KL N(0,1)": (float(kl_standard_normal(torch.zeros(1, 4), torch.zeros(1, 4))), 0.0),
        "KL mean 2": (float(kl_standard_normal(torch.full((1, 1), 2.0), torch.zeros(1, 1))), 2.0),
        "KL logvar 1": (float(kl_standard_normal(torch.zeros(1, 1), torch.ones(1, 1))), 0.5 * (math.e - 2)),
        "BCE y=1 e=0.5": (float(fb_loss(1, 0.5)), math.log(2)),
        "BCE y=0 e=0.5": (float(fb_loss(0, 0.5)), math.log(2)),
        "CE p=0.5": (float(prediction_loss((1, 0), (0.5, 0.5))), math.log(2)),
        "CE uniform 4": (float(prediction_loss((0, 1, 0, 0), (0.25,) * 4)), math.log(4)),
        "margin": (float(margin((0.7, 0.2, 0.1))), 0.5),
        "margin loss 0.9->0.7": (float(ce_margin_loss(0.9, 0.7)), 0.2),
        "margin loss constant": (float(ce_margin_loss(0.4, 0.4)), 0.0),
        "margin loss 0.3->0.8": (float(ce_margin_loss(0.3, 0.8)), -0.5),
        "lr 24999": (lr_at(24999, 1e-5, 25000), 1e-5),
        "lr 25000": (lr_at(25000, 1e-5, 25000), 5e-6),
        "lr 50000": (lr_at(50000, 1e-5, 25000), 2.5e-6),
    }
    bad = {k: v for k, v in checks.items() if abs(v[0] - v[1]) > 1e-6}
    verdict(7, "formula suite", not bad, f"{len(checks) - len(bad)}/{len(checks)} values exact to 1e-6"
            + (f"; off: {bad}" if bad else ""))


def test_c08_attention_oracle(verdict):
    errs = []
    for shift in [(0, 0, 0), (1, 1, 2), (1, 1, 3)]:
        torch.manual_seed(sum(shift))
        mha = MultiHeadAttention(8, 2).double()
        x = torch.randn(1, 4, 4, 4, 8, dtype=torch.float64)      # 64 tokens
        with torch.no_grad():
            got = shifted_window_attention(x, mha, (2, 2, 4), shift)
            errs.append(float((got - shifted_oracle(x, mha, (2, 2, 4), shift)).abs().max()))
    verdict(8, "attention oracle", max(errs) <= 1e-6,
            f"64 tokens, shifts (0,0,0) (1,1,2) (1,1,3): max error {max(errs):.1e} <= 1e-6")


def test_c09_stub_end_to_end(verdict):
    cfg = PipelineConfig()
    models = load_models(cfg, stub=True)
    secret, target = (c[1] for c in face_dataset(cfg, 2))
    pkg, art = run_pipeline(secret, target.frames[0], cfg, models)
    rec = recover_pipeline(pkg, pkg.key, models["hide"])
    err = float((rec - secret.frames).abs().max())
    same = len(art["cover"]) == len(secret) == 8
    verdict(9, "stub end-to-end", err <= 1e-4 and same,
            f"recovery error {err:.1e} <= 1e-4, cover frames {len(art['cover'])} == secret frames {len(secret)}")


def test_c10_decision(verdict):
    lam = 3.0
    e1 = math.exp(-1.0)
    deltas, pred = [0.1, 0.3, 0.58, 0.6], [1.0, 0.5, 0.25, 0.0]
    trace = DecisionTrace(deltas, [0.5] * 4, pred, mu=0.05)
    ln2 = math.log(2)
    want_steps = [ln2 + 1.0, ln2 + 0.5 + lam * (0.1 - 0.3), ln2 + 0.25 + lam * (0.3 - 0.58),
                  ln2 + 0.0 + lam * (0.58 - 0.6)]
    got_steps = [float(s["total"]) for s in trace.step_losses(lam)]
    two_point_six = float(DecisionTrace([0.9, 0.7], [0.5, e1], [0.0, 1.0]).step_losses(lam)[1]["total"])
    never = DecisionTrace([0.0, 0.2, 0.5, 0.9], [0.5] * 4, [0.0] * 4)
    first = DecisionTrace([0.6, 0.6, 0.6], [0.5] * 3, [0.0] * 3)
    x_i = trace.handover
    checks = [
        trace.labels == [0, 0, 1, 1],
        x_i == 3,
        [handover(k, x_i, 4) for k in range(1, 5)] == ["generation"] * 3 + ["re-prediction"],
        max(abs(a - b) for a, b in zip(got_steps, want_steps)) <= 1e-6,
        abs(float(total_decision_loss(trace, lam)) - sum(want_steps)) <= 1e-6,
        abs(two_point_six - 2.6) <= 1e-6,
        never.labels == [0, 0, 0, 1] and never.handover == 4,
        first.handover == 1,
    ]
    verdict(10, "decision machinery", all(checks),
            f"labels {trace.labels}, handover {x_i}, total {float(total_decision_loss(trace, lam)):.6f} "
            f"(hand {sum(want_steps):.6f}), single step 2.6 -> {two_point_six:.6f}, {sum(checks)}/{len(checks)} checks")
