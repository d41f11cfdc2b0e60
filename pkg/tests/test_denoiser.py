import numpy as np
import pytest
import torch

from bhxct.core import Image2D
from bhxct.denoiser import (
    Cnn,
    DenoiserConfig,
    PatchDataset,
    denoise,
    extract_patch_pairs,
    train_denoiser,
)


def rand_img(seed, n=64, pixel=0.1):
    return Image2D(np.random.default_rng(seed).random((n, n)), pixel)


def test_single_pair_when_patch_equals_image():
    a = rand_img(0, 32)
    ds = extract_patch_pairs(a, a, 32, 32, 0, augment=0)
    assert len(ds) == 1 and np.array_equal(ds.inputs[0], a.data)


def test_grid_count_and_congruence():
    a, b = rand_img(0), rand_img(1)
    ds = extract_patch_pairs(a, b, 32, 32, 0, augment=0)
    assert len(ds) == 4
    assert ds.inputs.shape == ds.targets.shape == (4, 32, 32)
    np.testing.assert_array_equal(ds.inputs[3], a.data[32:, 32:])
    np.testing.assert_array_equal(ds.targets[3], b.data[32:, 32:])
    aug = extract_patch_pairs(a, b, 32, 32, 0, augment=2)
    assert len(aug) == 12 and aug.augmented.sum() == 8
    # augmented copies apply the same transform to input and target
    for x, y in zip(aug.inputs, aug.targets):
        found = False
        for r in range(4):
            for flip in (False, True):
                for k in range(4):
                    xs = np.rot90(a.data[(k // 2) * 32:(k // 2) * 32 + 32, (k % 2) * 32:(k % 2) * 32 + 32], r)
                    ys = np.rot90(b.data[(k // 2) * 32:(k // 2) * 32 + 32, (k % 2) * 32:(k % 2) * 32 + 32], r)
                    if flip:
                        xs, ys = xs[:, ::-1], ys[:, ::-1]
                    if np.array_equal(xs, x) and np.array_equal(ys, y):
                        found = True
        assert found


def test_patch_validation():
    with pytest.raises(ValueError, match="mismatch"):
        extract_patch_pairs(rand_img(0, 32), rand_img(0, 16), 8, 8, 0)
    with pytest.raises(ValueError, match="exceeds"):
        extract_patch_pairs(rand_img(0, 16), rand_img(0, 16), 32, 8, 0)


@pytest.fixture(scope="module")
def random_net():
    torch.manual_seed(0)
    return Cnn(2, 4, residual=False, scale=0.7)


def test_zero_maps_to_zero(random_net):
    out = denoise(random_net, Image2D(np.zeros((20, 28)), 0.1))
    assert out.data.shape == (20, 28) and not out.data.any()


def test_output_congruent(random_net):
    img = rand_img(3, 30, 0.25)
    out = denoise(random_net, img)
    assert out.data.shape == img.data.shape and out.pixel_size == 0.25


@pytest.mark.parametrize("a", [0.5, 2.0, 10.0])
def test_positive_homogeneity(random_net, a):
    x = torch.from_numpy(np.random.default_rng(5).random((1, 1, 32, 32)).astype(np.float32))
    with torch.no_grad():
        fx, fax = random_net(x), random_net(a * x)
    rel = float((fax - a * fx).abs().max() / (a * fx).abs().max())
    assert rel < 1e-5


def test_no_bias_parameters():
    for residual in (False, True):
        net = Cnn(3, 4, residual=residual)
        assert not net.has_bias()
        assert not any("bias" in name for name, _ in net.named_parameters())


def test_backprop_matches_finite_differences():
    torch.manual_seed(1)
    net = Cnn(2, 4, residual=False).double()
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    y = torch.rand(1, 1, 16, 16, dtype=torch.float64)

    def loss():
        return torch.mean((net(x) - y) ** 2)

    net.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    eps = 1e-6
    for name, p in net.named_parameters():
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + eps
                up = float(loss())
                flat[i] = old - eps
                down = float(loss())
                flat[i] = old
            numeric = (up - down) / (2 * eps)
            analytic = float(p.grad.view(-1)[i])
            assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), 1e-6), name


def blobs(seed, n=32):
    rng = np.random.default_rng(seed)
    i, j = np.mgrid[:n, :n]
    img = np.zeros((n, n))
    for _ in range(3):
        ci, cj, r = rng.uniform(6, n - 6, 2).tolist() + [rng.uniform(3, 6)]
        img += (np.hypot(i - ci, j - cj) < r) * rng.uniform(0.3, 1.0)
    return img


def test_learns_identity_better_than_variance_floor():
    parts = []
    for s in range(6):
        img = Image2D(blobs(s), 0.1)
        parts.append(extract_patch_pairs(img, img, 32, 32, s, augment=1))
    ds = PatchDataset.concat(parts)
    net = train_denoiser(ds, DenoiserConfig(scales=2, base_channels=8, epochs=40, batch=4, val_fraction=0.25))
    floor = float(np.var(ds.targets))
    val = net.history["val_loss"]
    assert len(val) == 41
    assert val[-1] < 0.1 * floor
    assert net.history["train_loss"][-1] < net.history["train_loss"][0]


def test_training_deterministic_and_round_trip(tmp_path):
    img = Image2D(blobs(9), 0.1)
    ds = extract_patch_pairs(img, img, 16, 16, 0, augment=0)
    cfg = DenoiserConfig(scales=1, base_channels=4, epochs=2, batch=2)
    a, b = train_denoiser(ds, cfg), train_denoiser(ds, cfg)
    for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb)
    a.save(tmp_path / "net.json")
    back = Cnn.load(tmp_path / "net.json")
    assert back.topology() == a.topology()
    assert np.array_equal(denoise(back, img).data, denoise(a, img).data)
    assert back.history == a.history and len(back.history["train_loss"]) == 3
