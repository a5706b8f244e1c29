import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from fssfda.adaptation import (
    AdaptationRecipe,
    TrainLog,
    adapt,
    centroid_pseudo_labels,
    fine_tune,
    information_maximization,
    linear_probe,
    lp_ft,
    pseudo_label_adapt,
)
from fssfda.data import sample_few_shot, scan_image_folder, split_train_test
from fssfda.errors import ConfigError, DataError, TrainingError
from fssfda.models import ModelSpec, build_model, dataset_images, partition_parameters, predict, train_source
from fssfda.sam import SAM, sam_update
from fssfda.synthetic import SyntheticConfig, make_synthetic_dataset
from fssfda.transforms import AugmentConfig, augment

from conftest import SMALL_AUG


def state_equal(a: nn.Module, b: nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


@pytest.fixture(scope="module")
def two_domain(tmp_path_factory):
    root = make_synthetic_dataset(
        tmp_path_factory.mktemp("two"), SyntheticConfig(n_classes=2, per_class=20, seed=1)
    )
    src, tgt = scan_image_folder(root, "src"), scan_image_folder(root, "tgt")
    model = build_model(ModelSpec("small_cnn", 2, 32), seed=0, vocabulary=src.vocabulary)
    train_source(model, src, epochs=10, lr=1e-2, seed=0, aug=SMALL_AUG)
    return src, tgt, model


def fewshot_of(ds, k, seed):
    plan = split_train_test(ds, 0.8, seed)
    return ds.subset(sample_few_shot(ds, plan, k, seed).all_ids)


# ---------------------------------------------------------------- SAM


def test_sam_analytic_scalar():
    w = nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    seen = []

    def loss_fn():
        seen.append(w.detach().clone())
        return (w**2).sum()

    opt = SAM([w], torch.optim.SGD, rho=0.5, lr=0.1)
    loss = sam_update(w, loss_fn, opt)
    assert loss == 1.0
    assert seen[1].item() == pytest.approx(1.5, abs=1e-12)  # 1 + 0.5 * 2/|2|
    assert w.grad.item() == pytest.approx(3.0, abs=1e-6)
    assert w.item() == pytest.approx(1.0 - 0.1 * 3.0, abs=1e-12)


def test_sam_zero_gradient_skips_perturbation():
    w = nn.Parameter(torch.tensor([0.0]))
    seen = []

    def loss_fn():
        seen.append(w.item())
        return (w**2).sum()

    sam_update(w, loss_fn, SAM([w], torch.optim.Adam, rho=0.5, lr=0.1))
    assert seen == [0.0]
    assert w.item() == 0.0


def test_sam_rho_zero_matches_adam_bitwise():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(5, 8), nn.BatchNorm1d(8), nn.ReLU(), nn.Linear(8, 3))
    ref = nn.Sequential(nn.Linear(5, 8), nn.BatchNorm1d(8), nn.ReLU(), nn.Linear(8, 3))
    ref.load_state_dict(net.state_dict())
    x, y = torch.randn(50, 16, 5), torch.randint(0, 3, (50, 16))
    sam = SAM(net.parameters(), torch.optim.Adam, rho=0.0, lr=1e-2)
    adam = torch.optim.Adam(ref.parameters(), lr=1e-2)
    for i in range(50):
        sam_update(net, lambda: F.cross_entropy(net(x[i]), y[i]), sam)
        adam.zero_grad(set_to_none=True)
        F.cross_entropy(ref(x[i]), y[i]).backward()
        adam.step()
        assert state_equal(net, ref)


def test_sam_decreases_quadratic_bowl():
    torch.manual_seed(1)
    A = torch.diag(torch.tensor([1.0, 4.0, 9.0]))
    w = nn.Parameter(torch.tensor([2.0, -1.0, 1.5]))
    f = lambda: 0.5 * w @ A @ w  # noqa: E731
    start = f().item()
    opt = SAM([w], torch.optim.Adam, rho=0.05, lr=0.05)
    for _ in range(100):
        sam_update(w, f, opt)
    assert f().item() < start


def test_sam_gradient_matches_finite_differences():
    w0 = torch.tensor([0.7, -1.3], dtype=torch.float64)

    def f(v):
        return torch.sin(v[0]) * v[1] ** 2 + torch.exp(0.3 * v[0] * v[1])

    rho, h = 0.2, 1e-6

    def fd_grad(v):
        g = torch.zeros(2, dtype=torch.float64)
        for i in range(2):
            e = torch.zeros(2, dtype=torch.float64)
            e[i] = h
            g[i] = (f(v + e) - f(v - e)) / (2 * h)
        return g

    g = fd_grad(w0)
    expected = fd_grad(w0 + rho * g / g.norm())

    w = nn.Parameter(w0.clone())
    opt = SAM([w], torch.optim.SGD, rho=rho, lr=0.0)
    sam_update(w, lambda: f(w), opt)
    rel = (w.grad - expected).norm() / expected.norm()
    assert rel < 1e-4
    assert torch.equal(w.detach(), w0)  # lr 0: restored exactly


def test_sam_second_pass_keeps_bn_stats():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(4, 6), nn.BatchNorm1d(6), nn.Linear(6, 2)).train()
    ref = nn.Sequential(nn.Linear(4, 6), nn.BatchNorm1d(6), nn.Linear(6, 2)).train()
    ref.load_state_dict(net.state_dict())
    x, y = torch.randn(16, 4), torch.randint(0, 2, (16,))
    sam_update(net, lambda: F.cross_entropy(net(x), y), SAM(net.parameters(), rho=0.05, lr=1e-3))
    ref(x)  # exactly one statistics update
    assert torch.equal(net[1].running_mean, ref[1].running_mean)
    assert torch.equal(net[1].running_var, ref[1].running_var)


# ---------------------------------------------------------------- augmentation


def test_augment_contract(synth_root):
    path = next((synth_root / "src").rglob("*.png"))
    cfg = AugmentConfig()
    a = augment(path, train_mode=False, cfg=cfg)
    assert a.shape == (3, 224, 224)
    assert torch.equal(a, augment(path, train_mode=False, cfg=cfg))
    t1 = augment(path, train_mode=True, seed=7, cfg=cfg)
    assert torch.equal(t1, augment(path, train_mode=True, seed=7, cfg=cfg))
    assert not torch.equal(t1, augment(path, train_mode=True, seed=8, cfg=cfg))
    assert augment(path, True, 3, SMALL_AUG).shape == (3, 24, 24)


def test_augment_bad_file(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(DataError, match="broken.png"):
        augment(bad, train_mode=False)


# ---------------------------------------------------------------- recipes and logs


def test_recipe_validation():
    with pytest.raises(ConfigError):
        AdaptationRecipe(lr=0)
    with pytest.raises(ConfigError):
        AdaptationRecipe(method="SHOT")
    with pytest.raises(ConfigError):
        AdaptationRecipe(batch_size=0)
    r = AdaptationRecipe("LP_FT", lr=1e-3, seed=3)
    assert AdaptationRecipe.from_dict(r.to_dict()) == r


def test_trainlog_jsonl_round_trip(tmp_path):
    log = TrainLog()
    log.record("LP", 1.5)
    log.record("FT", 0.25)
    back = TrainLog.read(log.write(tmp_path / "log.jsonl"))
    assert back.losses == log.losses and back.phases == log.phases


# ---------------------------------------------------------------- trainers


def test_linear_probe_freezes_body(two_domain):
    src, tgt, model = two_domain
    few = fewshot_of(tgt, 3, 0)
    body_before = partition_parameters(model)[0].snapshot()
    out, log = linear_probe(model, few, AdaptationRecipe("LP", lr=1e-2, iterations=30), SMALL_AUG)
    body_after = partition_parameters(out)[0].snapshot()
    assert all(torch.equal(body_before[k], body_after[k]) for k in body_before)
    assert not torch.equal(model.head.direction, out.head.direction)
    assert len(log) == 30 and set(log.phases) == {"LP"}


def test_linear_probe_fits_separable_shots(two_domain):
    src, tgt, model = two_domain
    few = fewshot_of(src, 3, 0)
    out, _ = linear_probe(model, few, AdaptationRecipe("LP", lr=1e-2, iterations=100), SMALL_AUG)
    x, y = dataset_images(few, SMALL_AUG)
    logits, _ = predict(out, x, SMALL_AUG)
    assert (logits.argmax(1) == y).float().mean().item() == 1.0


def test_zero_iterations_leave_model_unchanged(two_domain):
    src, tgt, model = two_domain
    few = fewshot_of(tgt, 3, 0)
    for fn, method in ((linear_probe, "LP"), (fine_tune, "FT")):
        out, log = fn(model, few, AdaptationRecipe(method, iterations=0), SMALL_AUG)
        assert len(log) == 0 and state_equal(out, model)
    out, log = pseudo_label_adapt(model, tgt, AdaptationRecipe("PL_IM", iterations=0), SMALL_AUG)
    assert len(log) == 0 and state_equal(out, model)


def test_label_mismatch_raises(two_domain, synth_root):
    _, _, model = two_domain
    other = scan_image_folder(synth_root, "tgt")  # 3 classes
    with pytest.raises(TrainingError):
        fine_tune(model, other, AdaptationRecipe(iterations=1), SMALL_AUG)


@pytest.mark.slow
def test_fine_tune_default_length_and_loss_drop(two_domain):
    src, tgt, model = two_domain
    for seed in range(3):
        few = fewshot_of(tgt, 3, seed)
        _, log = fine_tune(model, few, AdaptationRecipe("FT", lr=1e-4, seed=seed), SMALL_AUG)
        assert len(log) == 1000
        assert set(log.phases) == {"FT"}
        assert np.mean(log.losses[-20:]) < log.losses[0]


def test_fine_tune_is_deterministic(two_domain):
    src, tgt, model = two_domain
    few = fewshot_of(tgt, 3, 1)
    r = AdaptationRecipe("FT", lr=1e-3, iterations=15, seed=4)
    a, la = fine_tune(model, few, r, SMALL_AUG)
    b, lb = fine_tune(model, few, r, SMALL_AUG)
    assert state_equal(a, b) and la.losses == lb.losses


def test_lp_ft_phases(two_domain):
    src, tgt, model = two_domain
    few = fewshot_of(tgt, 3, 0)
    r = AdaptationRecipe("LP_FT", lr=1e-3, iterations=12, seed=2)
    out, log = lp_ft(model, few, r, SMALL_AUG)
    assert len(log) == 24
    assert log.phases == ["LP"] * 12 + ["FT"] * 12
    probe_only, _ = lp_ft(model, few, r.replace(iterations=0, lp_iterations=12), SMALL_AUG)
    probed, _ = linear_probe(model, few, r.replace(method="LP", iterations=12), SMALL_AUG)
    assert state_equal(probe_only, probed)
    assert all(torch.equal(v, model.body.state_dict()[k]) for k, v in probed.body.state_dict().items())


def test_lp_ft_default_length_is_2000():
    r = AdaptationRecipe("LP_FT")
    assert r.phase1_iterations + r.iterations == 2000


def test_pseudo_label_adapt_freezes_head(two_domain):
    src, tgt, model = two_domain
    out, log = pseudo_label_adapt(model, tgt, AdaptationRecipe("PL_IM", lr=1e-3, iterations=20), SMALL_AUG)
    assert torch.equal(out.head.direction, model.head.direction)
    assert torch.equal(out.head.magnitude, model.head.magnitude)
    assert not state_equal(out.body, model.body)
    assert len(log) == 20


def test_pseudo_label_adapt_never_reads_labels(two_domain):
    src, tgt, model = two_domain
    from fssfda.data import DomainDataset, LabeledExample

    hidden = DomainDataset(tgt.domain_id, tuple(
        LabeledExample(e.example_id, e.image_ref, -1, e.domain_id) for e in tgt.examples), tgt.vocabulary)
    r = AdaptationRecipe("PL_IM", lr=1e-3, iterations=8, seed=1)
    a, _ = pseudo_label_adapt(model, tgt, r, SMALL_AUG)
    b, _ = pseudo_label_adapt(model, hidden, r, SMALL_AUG)
    assert state_equal(a, b)


def _mean_entropy(model, ds):
    x, _ = dataset_images(ds, SMALL_AUG)
    p = predict(model, x, SMALL_AUG)[0].softmax(1)
    return -(p * torch.log(p + 1e-12)).sum(1).mean().item()


def test_pseudo_label_adapt_sharpens_predictions(two_domain):
    src, tgt, model = two_domain
    before = _mean_entropy(model, tgt)
    for seed in range(3):
        out, _ = pseudo_label_adapt(model, tgt, AdaptationRecipe("PL_IM", lr=1e-3, iterations=60, seed=seed), SMALL_AUG)
        assert _mean_entropy(out, tgt) <= before


def test_pseudo_label_empty_target(two_domain):
    src, tgt, model = two_domain
    with pytest.raises(TrainingError):
        pseudo_label_adapt(model, tgt.subset([]), AdaptationRecipe("PL_IM"), SMALL_AUG)


def test_centroid_pseudo_labels_two_clusters():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(20, 4, generator=g) * 0.1 + torch.tensor([3.0, 0, 0, 0])
    b = torch.randn(20, 4, generator=g) * 0.1 + torch.tensor([0, 3.0, 0, 0])
    feats = torch.cat([a, b])
    # noisy soft predictions that lean the right way
    probs = torch.cat([torch.tensor([[0.6, 0.4]]).repeat(20, 1), torch.tensor([[0.45, 0.55]]).repeat(20, 1)])
    labels = centroid_pseudo_labels(feats, probs)
    assert labels.tolist() == [0] * 20 + [1] * 20


def test_information_maximization_values():
    confident_diverse = torch.tensor([[20.0, 0.0], [0.0, 20.0]])
    collapsed = torch.tensor([[20.0, 0.0], [20.0, 0.0]])
    assert information_maximization(confident_diverse) < information_maximization(collapsed)
    assert information_maximization(confident_diverse).item() == pytest.approx(-np.log(2), abs=1e-3)


def test_adapt_dispatch(two_domain):
    src, tgt, model = two_domain
    with pytest.raises(TrainingError):
        adapt(model, AdaptationRecipe("PL_IM"))
    with pytest.raises(TrainingError):
        adapt(model, AdaptationRecipe("FT"))
