import json
import subprocess
import sys

import pytest
import torch
import torch.nn.functional as F

from fssfda.data import scan_image_folder
from fssfda.errors import CheckpointError, ConfigError, ModelError, TrainingError
from fssfda.models import (
    ModelSpec,
    build_model,
    dataset_images,
    load_checkpoint,
    partition_parameters,
    predict,
    replace_head,
    save_checkpoint,
    train_source,
)

from conftest import SMALL_AUG


def small(n_classes=31, bottleneck=32):
    return ModelSpec("small_cnn", n_classes, bottleneck)


def test_forward_shape():
    m = build_model(small(31)).eval()
    assert m(torch.randn(4, 3, 24, 24)).shape == (4, 31)


def test_head_parameter_count():
    _, head = partition_parameters(build_model(small(31, 256)))
    assert head.count() == 256 * 31 + 31


def test_build_is_deterministic():
    a, b = build_model(small(), seed=3), build_model(small(), seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = build_model(small(), seed=4)
    assert not torch.equal(a.head.direction, c.head.direction)


def test_unknown_backbone():
    with pytest.raises(ModelError):
        build_model(ModelSpec("vgg_untitled", 5))


def test_spec_validation():
    with pytest.raises(ModelError):
        ModelSpec(n_classes=1)
    with pytest.raises(ModelError):
        ModelSpec(n_classes=3, bottleneck_dim=0)


def test_generic_weights_require_env(monkeypatch):
    monkeypatch.delenv("FSSFDA_WEIGHTS_DIR", raising=False)
    with pytest.raises(ConfigError, match="FSSFDA_WEIGHTS_DIR"):
        build_model(ModelSpec("resnet50", 65, pretrained_origin="generic_imagenet"))


def test_partition_is_exhaustive_and_disjoint():
    m = build_model(small())
    body, head = partition_parameters(m)
    ids_body = {id(p) for p in body.parameters()}
    ids_head = {id(p) for p in head.parameters()}
    assert ids_body.isdisjoint(ids_head)
    assert ids_body | ids_head == {id(p) for p in m.parameters()}
    assert body.count() + head.count() == sum(p.numel() for p in m.parameters() if p.requires_grad)


def _one_step(m, params):
    opt = torch.optim.SGD([p for p in params if p.requires_grad], lr=0.1)
    m.train()
    loss = F.cross_entropy(m(torch.randn(8, 3, 24, 24)), torch.arange(8) % m.spec.n_classes)
    loss.backward()
    opt.step()


def test_frozen_body_is_bit_identical():
    m = build_model(small(4))
    body, head = partition_parameters(m)
    body.freeze()
    before = body.snapshot()
    _one_step(m, m.parameters())
    after = body.snapshot()
    assert all(torch.equal(before[k], after[k]) for k in before)  # running BN stats included


def test_frozen_head_lets_body_move():
    m = build_model(small(4))
    body, head = partition_parameters(m)
    head.freeze()
    before_h, before_b = head.snapshot(), body.snapshot()
    _one_step(m, m.parameters())
    assert all(torch.equal(before_h[k], v) for k, v in head.snapshot().items())
    assert any(not torch.equal(before_b[k], v) for k, v in body.snapshot().items())


def test_weight_norm_rows():
    m = build_model(small(7))
    with torch.no_grad():
        m.head.magnitude.mul_(torch.linspace(0.5, 3, 7))
    w = m.head.weight
    assert torch.allclose(w.norm(dim=1), m.head.magnitude, atol=1e-5)


def test_replace_head():
    m = build_model(ModelSpec("small_cnn", 1000, 32))
    new = replace_head(m, 65)
    for k, v in m.body.state_dict().items():
        assert torch.equal(v, new.body.state_dict()[k])
    assert new(torch.randn(2, 3, 24, 24)).shape == (2, 65)
    assert new.spec.n_classes == 65
    with pytest.raises(ModelError):
        replace_head(m, 1)


def test_train_source_separable(synth_root):
    src = scan_image_folder(synth_root, "src")
    m = build_model(ModelSpec("small_cnn", src.n_classes, 32), seed=0)
    ckpt = train_source(m, src, epochs=15, lr=1e-2, seed=0, aug=SMALL_AUG)
    assert ckpt.manifest["source_train_accuracy"] >= 0.99
    assert ckpt.manifest["vocabulary"] == list(src.vocabulary)


def test_train_source_zero_epochs_and_determinism(synth_root):
    src = scan_image_folder(synth_root, "src")
    init = build_model(ModelSpec("small_cnn", src.n_classes, 32), seed=1)
    snap = {k: v.clone() for k, v in init.state_dict().items()}
    ck0 = train_source(init, src, epochs=0, lr=1e-2, seed=0, aug=SMALL_AUG)
    assert all(torch.equal(snap[k], ck0.state_dict[k]) for k in snap)
    a = train_source(build_model(init.spec, seed=1), src, epochs=2, lr=1e-2, seed=5, aug=SMALL_AUG)
    b = train_source(build_model(init.spec, seed=1), src, epochs=2, lr=1e-2, seed=5, aug=SMALL_AUG)
    assert all(torch.equal(a.state_dict[k], b.state_dict[k]) for k in a.state_dict)


def test_train_source_rejects_foreign_labels(synth_root):
    src = scan_image_folder(synth_root, "src")
    m = build_model(ModelSpec("small_cnn", 2, 32))
    with pytest.raises(TrainingError):
        train_source(m, src, epochs=1, lr=1e-2, seed=0, aug=SMALL_AUG)


def test_checkpoint_round_trip(tmp_path, synth_root):
    src = scan_image_folder(synth_root, "src")
    m = build_model(ModelSpec("small_cnn", src.n_classes, 32), seed=2, vocabulary=src.vocabulary)
    train_source(m, src, epochs=1, lr=1e-2, seed=0, aug=SMALL_AUG)
    save_checkpoint(m, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    for k, v in m.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    x, _ = dataset_images(src, SMALL_AUG)
    assert torch.equal(predict(m, x[:4], SMALL_AUG)[0], predict(loaded, x[:4], SMALL_AUG)[0])
    assert loaded.vocabulary == src.vocabulary


def test_checkpoint_tampered_manifest(tmp_path):
    m = build_model(small(5), vocabulary=[f"c{i}" for i in range(5)])
    save_checkpoint(m, tmp_path / "ck")
    man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    man["spec"]["n_classes"] = 6
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_fresh_process_logits(tmp_path):
    m = build_model(small(5), seed=9).eval()
    save_checkpoint(m, tmp_path / "ck")
    x = torch.linspace(-1, 1, 3 * 24 * 24).view(1, 3, 24, 24)
    torch.save(x, tmp_path / "x.pt")
    expected = m(x)
    code = (
        "import sys, torch; from fssfda.models import load_checkpoint;"
        f"m = load_checkpoint(r'{tmp_path / 'ck'}'); x = torch.load(r'{tmp_path / 'x.pt'}');"
        f"torch.save(m(x).detach(), r'{tmp_path / 'out.pt'}')"
    )
    subprocess.run([sys.executable, "-c", code], check=True)
    assert torch.equal(torch.load(tmp_path / "out.pt"), expected.detach())
