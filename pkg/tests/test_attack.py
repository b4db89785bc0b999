import numpy as np
import pytest
import torch

from texcamo.attack import (AttackConfig, AttackError, attack_loss, composite, generate_attack_texture,
                            initial_texture, load_texture, render_adversarial, save_texture, write_loss_csv)
from texcamo.boxes import Box
from texcamo.dataset import AttackSample, build_attack_dataset
from texcamo.detector import DetectorConfig, ExternalDetector, GradientsUnavailable, ToyDetector
from texcamo.dtn import DtnConfig, build_model
from texcamo.scene import CameraPose, SegmentationMask, sample_scene


def identity_dtn(N, dtype=torch.float64):
    model = build_model(DtnConfig(k=2, N=N, base_channels=4), dtype)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    return model


def full_mask_sample(N=32, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 0.8, size=(N, N, 3))
    m = np.ones((N, N), bool)
    return AttackSample(x_orig=x, x_ref=x, x_seg=SegmentationMask(m, m), pose=CameraPose(5.0, 10.0, 30.0),
                        gt_box=Box(0, 0, N - 1, N - 1), scene=sample_scene(seed))


def test_attack_loss_examples():
    assert attack_loss(torch.tensor([0.0], dtype=torch.float64)).item() == 0.0
    assert attack_loss([0.9]).item() == pytest.approx(2.302585, abs=1e-6)
    assert abs(attack_loss([0.9]).item() - 2.302585092994046) <= 1e-9
    assert attack_loss([0.0, 0.9]).item() == pytest.approx(1.151293, abs=1e-6)


def test_attack_loss_clamps_certain_detections():
    assert attack_loss([1.0], 1e-4).item() == pytest.approx(-np.log(1e-4))
    with pytest.raises(AttackError):
        attack_loss(torch.zeros(0))
    with pytest.raises(AttackError):
        AttackConfig(conf_clamp=0.0)


def test_composite_examples(rng):
    obj = rng.uniform(size=(8, 8, 3))
    orig = rng.uniform(size=(8, 8, 3))
    np.testing.assert_array_equal(composite(obj, orig, np.ones((8, 8))), obj)
    np.testing.assert_array_equal(composite(np.zeros_like(obj), orig, np.zeros((8, 8))), orig)
    m = rng.uniform(size=(8, 8)) < 0.5
    masked = obj * m[..., None]
    out = composite(masked, orig, m)
    for i in range(8):
        for j in range(8):
            np.testing.assert_array_equal(out[i, j], obj[i, j] if m[i, j] else orig[i, j])
    with pytest.raises(AttackError):
        composite(obj, orig[:4], m)


def test_render_adversarial_deterministic_and_masked():
    (s,) = build_attack_dataset([sample_scene(4)], N=32)
    model = identity_dtn(32)
    tex = torch.as_tensor(initial_texture(AttackConfig()))
    a = render_adversarial(s, tex, model, 11)
    b = render_adversarial(s, tex, model, 11)
    assert torch.equal(a, b)
    assert not torch.equal(a, render_adversarial(s, tex, model, 12))
    outside = ~s.x_seg.mask
    np.testing.assert_array_equal(a.detach().numpy()[outside], s.x_orig[outside])


def test_zero_epochs_returns_initial_texture(brightness_detector):
    cfg = AttackConfig(epochs=0, seed=5)
    res = generate_attack_texture([full_mask_sample()], identity_dtn(32), brightness_detector(32), cfg)
    np.testing.assert_array_equal(res.texture, initial_texture(cfg))
    assert res.epoch_losses == []
    assert 0.25 <= res.texture.min() and res.texture.max() <= 0.75


def test_brightness_detector_is_driven_to_black(brightness_detector):
    cfg = AttackConfig(epochs=150, batch_size=4, learning_rate=0.01, seed=1)
    data = [full_mask_sample(seed=i) for i in range(4)]
    res = generate_attack_texture(data, identity_dtn(32), brightness_detector(32), cfg)
    losses = np.array(res.epoch_losses)
    assert np.all(np.diff(losses) <= 1e-12)
    assert res.texture.mean() < 1e-3
    assert losses[-1] < 1e-3


def test_box_constraint_every_step(brightness_detector):
    seen = []

    def check(step, tex, loss):
        seen.append(step)
        assert float(tex.min()) >= 0.0 and float(tex.max()) <= 1.0

    cfg = AttackConfig(epochs=50, batch_size=1, learning_rate=0.2)
    generate_attack_texture([full_mask_sample(seed=i) for i in range(2)], identity_dtn(32),
                            brightness_detector(32), cfg, on_step=check)
    assert seen == list(range(1, 101))


def test_same_seed_same_texture(brightness_detector):
    cfg = AttackConfig(epochs=3, batch_size=2, seed=9)
    data = [full_mask_sample(seed=i) for i in range(3)]
    a = generate_attack_texture(data, identity_dtn(32), brightness_detector(32), cfg)
    b = generate_attack_texture(data, identity_dtn(32), brightness_detector(32), cfg)
    np.testing.assert_array_equal(a.texture, b.texture)
    assert a.epoch_losses == b.epoch_losses


def test_score_only_detector_rejected():
    ext = ExternalDetector(["true"], N=32)
    with pytest.raises(GradientsUnavailable, match="gradients unavailable"):
        generate_attack_texture([full_mask_sample()], identity_dtn(32), ext, AttackConfig(epochs=1))


def test_full_chain_gradient():
    torch.manual_seed(0)
    (s,) = build_attack_dataset([sample_scene(6)], N=64)
    model = build_model(DtnConfig(k=2, N=64, base_channels=4, seed=2), torch.float64)
    det = ToyDetector(DetectorConfig(width=8, seed=4)).to(torch.float64)
    from texcamo.detector import differentiable_confidence

    def f(tex):
        img = render_adversarial(s, tex, model, 21)
        return attack_loss(differentiable_confidence(det, img[None]))

    tex = torch.as_tensor(initial_texture(AttackConfig(seed=3))).requires_grad_(True)
    f(tex).backward()
    live = torch.nonzero(tex.grad.reshape(-1).abs() > 1e-7).reshape(-1)
    assert live.numel() >= 10
    h = 1e-6
    for idx in live[torch.randperm(live.numel(), generator=torch.Generator().manual_seed(0))[:10]].tolist():
        t = tex.detach().clone().reshape(-1)
        t[idx] += h
        up = f(t.reshape(tex.shape)).item()
        t[idx] -= 2 * h
        down = f(t.reshape(tex.shape)).item()
        fd = (up - down) / (2 * h)
        an = tex.grad.reshape(-1)[idx].item()
        assert abs(fd - an) <= 1e-3 * abs(an)


def test_texture_io(tmp_path):
    tex = initial_texture(AttackConfig(seed=2))
    path = save_texture(tex, tmp_path / "t", {"seed": 2})
    back = load_texture(path)
    assert back.shape == (16, 16, 3)
    assert np.abs(back - tex).max() <= 0.5 / 255 + 1e-12
    write_loss_csv(tmp_path / "loss.csv", [0.5, 0.25])
    assert (tmp_path / "loss.csv").read_text().splitlines() == ["epoch,loss", "0,0.5", "1,0.25"]
