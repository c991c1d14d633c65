import math

import pytest
import torch
import torch.nn as nn

from fdcheck import check
from tractokit.errors import CheckpointError, InvalidInputError, NumericError
from tractokit.nn import check_finite
from tractokit.nn.checkpoint import decode_checkpoint, encode_checkpoint, load_module, save_module
from tractokit.nn.layers import (
    ConvBlock2d,
    DGCNNStack,
    EdgeConv,
    MiniPointNet,
    PointNetEncoder,
    STNkD,
    StreamlineCNN,
    conv_bn,
    mlp,
)
from tractokit.nn.losses import (
    chamfer_l1,
    cross_entropy_loss,
    focal_loss,
    gumbel_noise,
    gumbel_softmax_sample,
    kl_to_uniform,
)
from tractokit.nn.optim import (
    WarmRestartSchedule,
    WarmupCosineSchedule,
    lr_at,
    make_optimizer,
    optimizer_step,
    set_lr,
)

TOL = 1e-4
TRIALS = range(10)


def f64(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).requires_grad_(True)


def layer_check(module, x, seed, train=True):
    torch.manual_seed(seed)
    module = module.double().train(train)
    # perturb every parameter so no layer sits at its (often zero) initialisation
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    tensors = [x] + list(module.parameters())
    return check(lambda: module(x), tensors, seed=seed, reseed=lambda: torch.manual_seed(1000 + seed))


# ---------------------------------------------------------------- gradient checks


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_linear(seed):
    assert layer_check(nn.Linear(5, 4), f64(3, 5, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_conv1d_bn(seed):
    assert layer_check(conv_bn(3, 6), f64(4, 3, 7, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_conv_block(seed):
    assert layer_check(ConvBlock2d(3, 4), f64(2, 3, 6, 6, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_maxpool_relu(seed):
    assert layer_check(nn.Sequential(nn.ReLU(), nn.MaxPool2d(2)), f64(2, 3, 6, 6, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_batchnorm(seed):
    assert layer_check(nn.BatchNorm1d(4), f64(6, 4, 3, seed=seed), seed) <= TOL
    assert layer_check(nn.BatchNorm2d(3), f64(2, 3, 4, 4, seed=seed), seed, train=False) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_dropout(seed):
    assert layer_check(nn.Dropout(0.5), f64(4, 6, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_streamline_cnn(seed):
    assert layer_check(StreamlineCNN((2, 3, 3, 4), 0.5), f64(2, 16, 16, 3, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_stn(seed):
    assert layer_check(STNkD(3, (4, 5), (6,)), f64(3, 3, 8, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_pointnet(seed):
    enc = PointNetEncoder((4, 5, 5, 6), (5, 6), (5,))
    assert layer_check(enc, f64(3, 9, 3, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_minipointnet(seed):
    assert layer_check(MiniPointNet((4, 5, 6)), f64(2, 3, 5, 3, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_edgeconv(seed):
    assert layer_check(EdgeConv(3, 4, k=3), f64(2, 6, 3, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_dgcnn(seed):
    assert layer_check(DGCNNStack(3, 4, (4, 5), k=3), f64(2, 6, 3, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_mlp(seed):
    assert layer_check(mlp((5, 7, 3), final_relu=True), f64(4, 5, seed=seed), seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_cross_entropy(seed):
    logits = f64(6, 43, seed=seed, scale=2.0)
    labels = torch.randint(0, 43, (6,), generator=torch.Generator().manual_seed(seed))
    assert check(lambda: cross_entropy_loss(logits, labels), [logits], seed=seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_focal(seed):
    logits = f64(6, 43, seed=seed, scale=2.0)
    labels = torch.randint(0, 43, (6,), generator=torch.Generator().manual_seed(seed))
    gamma = [0.0, 0.5, 1.0, 2.0, 3.0][seed % 5]
    assert check(lambda: focal_loss(logits, labels, gamma), [logits], seed=seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_chamfer(seed):
    a, b = f64(2, 7, 3, seed=seed), f64(2, 5, 3, seed=seed + 100)
    assert check(lambda: chamfer_l1(a, b), [a, b], seed=seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_kl_uniform(seed):
    logits = f64(3, 4, 9, seed=seed, scale=2.0)
    assert check(lambda: kl_to_uniform(logits), [logits], seed=seed) <= TOL


@pytest.mark.parametrize("seed", TRIALS)
def test_grad_gumbel_soft(seed):
    logits = f64(3, 6, seed=seed)
    noise = gumbel_noise((3, 6), torch.Generator().manual_seed(seed), torch.float64)
    tau = [1.0, 0.5, 0.25][seed % 3]
    assert check(lambda: gumbel_softmax_sample(logits, tau, noise=noise), [logits], seed=seed) <= TOL


# ---------------------------------------------------------------- layer behaviour


def test_relu_and_global_max():
    assert nn.ReLU()(torch.tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    x = torch.randn(4, 9)
    assert torch.equal(x.amax(dim=1), torch.tensor([max(r) for r in x.tolist()]))
    perm = torch.randperm(9)
    assert torch.equal(x.amax(dim=1), x[:, perm].amax(dim=1))


def test_streamline_cnn_pooled_channels():
    out = StreamlineCNN().eval()(torch.randn(2, 30, 30, 3))
    assert out.shape[:2] == (2, 256)
    assert out.amax(dim=(2, 3)).shape == (2, 256)


def test_stn_identity_at_init():
    stn = STNkD(8, (16, 32), (16,)).eval()
    out = stn(torch.randn(3, 8, 10))
    assert torch.equal(out, torch.eye(8).expand(3, 8, 8))


def test_batchnorm_eval_is_fixed_affine():
    bn = nn.BatchNorm1d(4)
    bn.train()
    bn(torch.randn(8, 4) * 3 + 1)
    before = bn.running_mean.clone()
    bn.eval()
    x = torch.randn(5, 4)
    y1, y2 = bn(x), bn(x)
    assert torch.equal(y1, y2) and torch.equal(bn.running_mean, before)


def test_dropout_eval_identity():
    x = torch.randn(10, 10)
    assert torch.equal(nn.Dropout(0.5).eval()(x), x)


def test_shape_errors():
    with pytest.raises(InvalidInputError):
        StreamlineCNN()(torch.randn(2, 30, 30, 4))
    with pytest.raises(InvalidInputError):
        PointNetEncoder()(torch.randn(2, 10, 2))
    with pytest.raises(InvalidInputError):
        STNkD(4, (8,), (8,))(torch.randn(2, 5, 7))


def test_check_finite():
    with pytest.raises(NumericError):
        check_finite(torch.tensor([1.0, float("nan")]))


def test_frozen_parameters_get_no_grad():
    net = nn.Sequential(nn.Linear(3, 3), nn.Linear(3, 1))
    for p in net[0].parameters():
        p.requires_grad_(False)
    net(torch.randn(4, 3)).sum().backward()
    assert all(p.grad is None for p in net[0].parameters())
    assert all(p.grad is not None for p in net[1].parameters())


def test_linear_gradient_structure():
    w = torch.zeros(2, 3, requires_grad=True)
    x = torch.tensor([1.0, 2.0, 3.0])
    (w @ x).sum().backward()
    assert torch.equal(w.grad, x.expand(2, 3))


# ---------------------------------------------------------------- loss values


def test_focal_example():
    logits = torch.tensor([[2.0, 0.0, 0.0]], dtype=torch.float64)
    pt = math.exp(2) / (math.exp(2) + 2)
    assert pt == pytest.approx(0.78699, abs=1e-5)
    ref = (1 - pt) ** 2 * -math.log(pt)
    assert focal_loss(logits, [0], 2.0).item() == pytest.approx(ref, rel=1e-12)
    # direct evaluation gives 0.0108693; the commonly quoted 0.010876 is a rounding slip
    assert ref == pytest.approx(0.0108693, abs=1e-7)


def test_focal_gamma_zero_is_ce():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        logits = torch.randn(16, 43, generator=g, dtype=torch.float64) * 3
        labels = torch.randint(0, 43, (16,), generator=g)
        assert abs(focal_loss(logits, labels, 0.0).item() - cross_entropy_loss(logits, labels).item()) <= 1e-12


def test_focal_confident_goes_to_zero():
    logits = torch.tensor([[40.0, 0.0, 0.0]], dtype=torch.float64)
    assert focal_loss(logits, [0]).item() < 1e-30


def test_ce_uniform_and_margin():
    assert cross_entropy_loss(torch.zeros(5, 43, dtype=torch.float64), [0, 1, 2, 3, 42]).item() == pytest.approx(
        math.log(43), abs=1e-9)
    logits = torch.zeros(1, 43)
    logits[0, 7] = 3.0
    assert cross_entropy_loss(logits, [7]).item() < math.log(43)


def test_label_range():
    with pytest.raises(InvalidInputError):
        focal_loss(torch.zeros(2, 43), [0, 43])
    with pytest.raises(InvalidInputError):
        cross_entropy_loss(torch.zeros(2, 43), [-1, 0])
    with pytest.raises(InvalidInputError):
        focal_loss(torch.zeros(2, 43), [0, 1], gamma=-1)


def test_chamfer_values():
    a = torch.randn(20, 3, dtype=torch.float64)
    b = torch.randn(13, 3, dtype=torch.float64)
    assert chamfer_l1(a, a).item() == 0.0
    assert chamfer_l1(torch.zeros(1, 3), torch.tensor([[3.0, 4.0, 0.0]])).item() == pytest.approx(10.0)
    assert chamfer_l1(a, b).item() == pytest.approx(chamfer_l1(b, a).item(), rel=1e-15)
    with pytest.raises(InvalidInputError):
        chamfer_l1(torch.zeros(0, 3), b)


def test_kl_values():
    assert kl_to_uniform(torch.full((4, 5, 8192), 1.7, dtype=torch.float64)).item() == pytest.approx(0, abs=1e-12)
    onehot = torch.zeros(1, 8192, dtype=torch.float64)
    onehot[0, 3] = 1000.0
    assert kl_to_uniform(onehot).item() == pytest.approx(math.log(8192), abs=1e-9)
    assert math.log(8192) == pytest.approx(9.0109, abs=1e-4)
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        assert kl_to_uniform(torch.randn(7, 11, generator=g)).item() >= 0


def test_gumbel_properties():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(50, 10)
    soft = gumbel_softmax_sample(logits, 0.5, generator=g)
    assert torch.allclose(soft.sum(-1), torch.ones(50), atol=1e-6)
    hard = gumbel_softmax_sample(logits, 0.5, hard=True, generator=g)
    assert torch.equal((hard == 1).sum(-1), torch.ones(50, dtype=torch.long))
    assert torch.equal(hard.sum(-1), torch.ones(50))
    with pytest.raises(InvalidInputError):
        gumbel_softmax_sample(logits, 0.0)


def test_gumbel_straight_through_gradient():
    logits = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
    noise = gumbel_noise((3, 5), torch.Generator().manual_seed(1), torch.float64)
    w = torch.randn(3, 5, dtype=torch.float64)
    (gumbel_softmax_sample(logits, 0.7, hard=True, noise=noise) * w).sum().backward()
    g_hard = logits.grad.clone()
    logits.grad = None
    (gumbel_softmax_sample(logits, 0.7, hard=False, noise=noise) * w).sum().backward()
    assert torch.allclose(g_hard, logits.grad)


def test_gumbel_monte_carlo():
    logits = torch.tensor([1.0, 0.0, -0.5, 2.0], dtype=torch.float64)
    g = torch.Generator().manual_seed(123)
    draws = gumbel_softmax_sample(logits.expand(100_000, 4), 1.0, generator=g).argmax(-1)
    freq = torch.bincount(draws, minlength=4).double() / 100_000
    assert (freq - torch.softmax(logits, 0)).abs().max().item() <= 0.01


# ---------------------------------------------------------------- optimizers


def test_zero_grad_no_change():
    for variant in ("adam", "adamw"):
        p = torch.nn.Parameter(torch.tensor([1.5, -2.0]))
        opt = make_optimizer([p], variant, lr=0.1, weight_decay=0.0)
        optimizer_step(opt, [p], [torch.zeros(2)])
        assert p.tolist() == [1.5, -2.0]


def test_quadratic_converges():
    for variant in ("adam", "adamw"):
        x = torch.nn.Parameter(torch.tensor([3.0], dtype=torch.float64))
        opt = make_optimizer([x], variant, lr=0.1)
        for step in range(500):
            optimizer_step(opt, [x], [2 * x.detach()])
            if abs(x.item()) < 1e-3:
                break
        assert abs(x.item()) < 1e-3


def test_adamw_decay_shrinks():
    p = torch.nn.Parameter(torch.tensor([2.0, -3.0]))
    opt = make_optimizer([p], "adamw", lr=0.01, weight_decay=0.5)
    before = p.abs().clone()
    optimizer_step(opt, [p], [torch.zeros(2)])
    assert torch.all(p.abs() < before)


def test_adam_moments_match_reference():
    # hand-rolled Adam with bias correction as the oracle
    p = torch.nn.Parameter(torch.tensor([0.5, -1.0], dtype=torch.float64))
    opt = make_optimizer([p], "adamw", lr=0.01, weight_decay=0.1)
    ref = p.detach().clone()
    m = torch.zeros(2, dtype=torch.float64)
    v = torch.zeros(2, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    for t in range(1, 20):
        grad = torch.randn(2, generator=g, dtype=torch.float64)
        optimizer_step(opt, [p], [grad])
        ref = ref * (1 - 0.01 * 0.1)
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad**2
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / ((v / (1 - 0.999**t)).sqrt() + 1e-8)
    assert torch.allclose(p.detach(), ref, rtol=1e-10, atol=1e-12)
    state = opt.state[p]
    assert state["exp_avg"].shape == p.shape and state["exp_avg_sq"].shape == p.shape


def test_optimizer_shape_mismatch():
    p = torch.nn.Parameter(torch.zeros(3))
    opt = make_optimizer([p], "adam")
    with pytest.raises(InvalidInputError):
        optimizer_step(opt, [p], [torch.zeros(4)])
    with pytest.raises(InvalidInputError):
        make_optimizer([p], "sgd")


# ---------------------------------------------------------------- schedules


@pytest.mark.parametrize("t_0,t_mult", [(10, 2), (10, 1), (3, 3), (1, 2)])
def test_warm_restarts_match_torch(t_0, t_mult):
    sched = WarmRestartSchedule(1e-4, t_0, t_mult, 1e-7)
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.SGD([p], lr=1e-4)
    ref = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=t_0, T_mult=t_mult, eta_min=1e-7)
    for step in range(200):
        assert lr_at(sched, step) == pytest.approx(opt.param_groups[0]["lr"], rel=1e-9)
        opt.step()
        ref.step()


def test_warm_restart_start_and_jumps():
    sched = WarmRestartSchedule()
    assert lr_at(sched, 0) == 1e-4
    for boundary in (10, 30, 70):
        assert lr_at(sched, boundary) == 1e-4
        assert lr_at(sched, boundary - 1) < 1e-5
    assert all(lr_at(sched, s) > 0 for s in range(500))


def test_warmup_cosine():
    s = WarmupCosineSchedule()
    assert lr_at(s, 0) == 1e-6
    assert lr_at(s, 5) == pytest.approx(1e-6 + 5 * (5e-4 - 1e-6) / 10)
    assert lr_at(s, 10) == pytest.approx(1e-6 + 0.5 * (5e-4 - 1e-6) * (1 + math.cos(math.pi * 10 / 300)))
    assert lr_at(s, 300) == 1e-6
    assert lr_at(s, 1000) == 1e-6
    lrs = [lr_at(s, t) for t in range(10, 300)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(lr_at(s, t) > 0 for t in range(400))


def test_set_lr():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = make_optimizer([p], "adam", lr=1.0)
    set_lr(opt, 0.25)
    assert opt.param_groups[0]["lr"] == 0.25


def test_schedule_validation():
    with pytest.raises(InvalidInputError):
        WarmRestartSchedule(t_0=0)
    with pytest.raises(InvalidInputError):
        lr_at(WarmRestartSchedule(), -1)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    tensors = {
        "a": torch.randn(3, 4),
        "b": torch.randn(2, dtype=torch.float64),
        "c": torch.arange(5),
        "scalar": torch.tensor(2.5),
    }
    blob = encode_checkpoint(tensors, {"step": 7})
    back, meta = decode_checkpoint(blob)
    assert meta["step"] == 7
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)
    assert encode_checkpoint(tensors, {"step": 7}) == blob


def test_checkpoint_corruption():
    blob = encode_checkpoint({"a": torch.ones(4)}, {})
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-3])
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + blob[4:])


def test_module_roundtrip(tmp_path):
    a = PointNetEncoder((4, 5, 6, 7), (5, 6), (5,))
    a.train()
    a(torch.randn(3, 10, 3))
    save_module(tmp_path / "m.ckpt", a, {"epoch": 1})
    b = PointNetEncoder((4, 5, 6, 7), (5, 6), (5,))
    meta = load_module(tmp_path / "m.ckpt", b)
    assert meta["epoch"] == 1
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    with pytest.raises(CheckpointError):
        load_module(tmp_path / "m.ckpt", PointNetEncoder((4, 5, 6, 8), (5, 6), (5,)))
