"""Adaptable classifier: backbone -> bottleneck (body) and a weight-normalized linear head."""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DomainDataset
from .errors import CheckpointError, ConfigError, ModelError, TrainingError
from .transforms import AugmentConfig, eval_transform, load_image, train_transform

ARTIFACT_VERSION = "1"
WEIGHTS_ENV = "FSSFDA_WEIGHTS_DIR"
DEVICE_ENV = "FSSFDA_DEVICE"
ORIGINS = ("generic_imagenet", "source_checkpoint", "random")


@dataclass(frozen=True)
class ModelSpec:
    backbone_id: str = "small_cnn"
    n_classes: int = 2
    bottleneck_dim: int = 256
    pretrained_origin: str = "random"

    def __post_init__(self):
        if self.bottleneck_dim < 1:
            raise ModelError(f"bottleneck_dim must be >= 1, got {self.bottleneck_dim}")
        if self.n_classes < 2:
            raise ModelError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.pretrained_origin not in ORIGINS:
            raise ModelError(f"unknown pretrained origin {self.pretrained_origin!r}")


class SmallCNN(nn.Module):
    """Three conv blocks and global pooling; enough for the synthetic domains on a CPU."""

    def __init__(self, width: int = 16):
        super().__init__()

        def block(cin, cout, pool):
            layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
            if pool:
                layers.append(nn.MaxPool2d(2))
            return layers

        self.features = nn.Sequential(
            *block(3, width // 2, True), *block(width // 2, width, True), *block(width, 2 * width, False)
        )
        self.out_dim = 2 * width

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)


def _resnet(name: str) -> Callable[[], nn.Module]:
    def make() -> nn.Module:
        import torchvision

        net = getattr(torchvision.models, name)(weights=None)
        net.out_dim = net.fc.in_features
        net.fc = nn.Identity()
        return net

    return make


BACKBONES: dict[str, Callable[[], nn.Module]] = {
    "small_cnn": SmallCNN,
    "resnet50": _resnet("resnet50"),
    "resnet101": _resnet("resnet101"),
}


def _weights_file(name: str) -> Path:
    base = os.environ.get(WEIGHTS_ENV)
    if not base:
        raise ConfigError(f"generic weights for {name} requested but {WEIGHTS_ENV} is not set")
    for cand in sorted(Path(base).glob(f"{name}*.pth")):
        return cand
    raise ConfigError(f"no {name}*.pth weights under {WEIGHTS_ENV}={base}")


def _load_generic(body: "Body", backbone_id: str) -> None:
    """Load ``<backbone_id>*.pth`` from the weights directory.

    The file is either a plain backbone state dict (torchvision layout; any
    ``fc.*`` classifier keys are dropped) or a whole-body state dict with
    ``backbone.*`` / ``bottleneck.*`` keys. The bottleneck may be absent.
    """
    path = _weights_file(backbone_id)
    state = torch.load(path, map_location="cpu", weights_only=True)
    if any(k.startswith("backbone.") for k in state):
        target = body
    else:
        target = body.backbone
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    missing, unexpected = target.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.startswith("bottleneck.")]
    if missing or unexpected:
        raise ConfigError(f"weights in {path} do not fit {backbone_id}: missing {missing[:3]}, unexpected {unexpected[:3]}")


class WeightNormLinear(nn.Module):
    """Linear map whose rows are ``magnitude[k] * direction[k] / ||direction[k]||`` (no bias)."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        direction = torch.empty(out_features, in_features)
        nn.init.kaiming_uniform_(direction, a=math.sqrt(5))
        self.direction = nn.Parameter(direction)
        self.magnitude = nn.Parameter(direction.norm(dim=1).detach().clone())

    @property
    def weight(self) -> torch.Tensor:
        return self.magnitude[:, None] * self.direction / self.direction.norm(dim=1, keepdim=True)

    def forward(self, x):
        return F.linear(x, self.weight)


class Body(nn.Module):
    def __init__(self, backbone: nn.Module, bottleneck_dim: int):
        super().__init__()
        self.backbone = backbone
        self.bottleneck = nn.Sequential(nn.Linear(backbone.out_dim, bottleneck_dim), nn.BatchNorm1d(bottleneck_dim))

    def forward(self, x):
        return self.bottleneck(self.backbone(x))


class AdaptableModel(nn.Module):
    def __init__(self, spec: ModelSpec, body: Body, head: WeightNormLinear, vocabulary=None, meta=None):
        super().__init__()
        self.spec = spec
        self.body = body
        self.head = head
        self.vocabulary = tuple(vocabulary) if vocabulary is not None else None
        self.meta = dict(meta or {})

    def forward(self, x):
        return self.head(self.body(x))

    def features(self, x):
        return self.body(x)

    def train(self, mode: bool = True):
        # a frozen body keeps its BatchNorm statistics untouched
        super().train(mode)
        if mode and not any(p.requires_grad for p in self.body.parameters()):
            self.body.eval()
        return self


class ParameterHandle:
    """Freeze/unfreeze view over one side of the body/head partition."""

    def __init__(self, module: nn.Module):
        self.module = module

    def parameters(self) -> Iterator[nn.Parameter]:
        return iter(self.module.parameters())

    def freeze(self) -> None:
        self.module.requires_grad_(False)

    def unfreeze(self) -> None:
        self.module.requires_grad_(True)

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.module.parameters())

    def count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def snapshot(self) -> dict[str, torch.Tensor]:
        """Parameters and buffers (BatchNorm statistics included), cloned."""
        return {k: v.detach().clone() for k, v in self.module.state_dict().items()}


def build_model(spec: ModelSpec, seed: int = 0, vocabulary=None) -> AdaptableModel:
    if spec.backbone_id not in BACKBONES:
        raise ModelError(f"unknown backbone {spec.backbone_id!r}; registered: {sorted(BACKBONES)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        body = Body(BACKBONES[spec.backbone_id](), spec.bottleneck_dim)
        head = WeightNormLinear(spec.bottleneck_dim, spec.n_classes)
    if spec.pretrained_origin == "generic_imagenet":
        _load_generic(body, spec.backbone_id)
    if vocabulary is not None and len(vocabulary) != spec.n_classes:
        raise ModelError(f"vocabulary has {len(vocabulary)} entries for {spec.n_classes} classes")
    return AdaptableModel(spec, body, head, vocabulary)


def partition_parameters(model: AdaptableModel) -> tuple[ParameterHandle, ParameterHandle]:
    return ParameterHandle(model.body), ParameterHandle(model.head)


def replace_head(model: AdaptableModel, n_classes_new: int, seed: int = 0, vocabulary=None) -> AdaptableModel:
    """Copy of ``model`` with the same body and a freshly initialised head of the new width."""
    if n_classes_new < 2:
        raise ModelError(f"n_classes must be >= 2, got {n_classes_new}")
    new = copy.deepcopy(model)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        new.head = WeightNormLinear(model.spec.bottleneck_dim, n_classes_new).to(device_of(model))
    new.spec = ModelSpec(model.spec.backbone_id, n_classes_new, model.spec.bottleneck_dim, model.spec.pretrained_origin)
    new.vocabulary = tuple(vocabulary) if vocabulary is not None else None
    return new


# ---------------------------------------------------------------- images


def runtime_device() -> torch.device:
    """``$FSSFDA_DEVICE`` if set, else the first CUDA device when available, else CPU."""
    name = os.environ.get(DEVICE_ENV)
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def device_of(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


@lru_cache(maxsize=16384)
def _cached_image(path: str, size: int) -> torch.Tensor:
    return load_image(path, size)


def dataset_images(ds: DomainDataset, aug: AugmentConfig, ids=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Decoded uint8 images and labels for ``ids`` (default: all examples, in dataset order)."""
    exs = ds.examples if ids is None else [ds.get(i) for i in ids]
    if not exs:
        return torch.empty(0, 3, aug.load_size, aug.load_size, dtype=torch.uint8), torch.empty(0, dtype=torch.long)
    x = torch.stack([_cached_image(e.image_ref, aug.load_size) for e in exs])
    y = torch.tensor([e.class_id for e in exs], dtype=torch.long)
    return x, y


@torch.no_grad()
def predict(model: AdaptableModel, images: torch.Tensor, aug: AugmentConfig, batch_size: int = 256):
    """Eval-mode logits and bottleneck features for uint8 images."""
    was_training = model.training
    model.eval()
    dev = device_of(model)
    logits, feats = [], []
    for i in range(0, len(images), batch_size):
        f = model.body(eval_transform(images[i : i + batch_size], aug).to(dev))
        feats.append(f.cpu())
        logits.append(model.head(f).cpu())
    model.train(was_training)
    if not logits:
        return torch.empty(0, model.spec.n_classes), torch.empty(0, model.spec.bottleneck_dim)
    return torch.cat(logits), torch.cat(feats)


# ---------------------------------------------------------------- source training


@dataclass
class SourceRecipe:
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    label_smoothing: float = 0.1
    augmentation: bool = True


@dataclass
class Checkpoint:
    state_dict: dict
    manifest: dict = field(default_factory=dict)


def train_source(
    model: AdaptableModel,
    source_train: DomainDataset,
    epochs: int,
    lr: float,
    seed: int,
    recipe: SourceRecipe | None = None,
    aug: AugmentConfig | None = None,
) -> Checkpoint:
    """Supervised source training with label-smoothed cross-entropy (SGD + momentum, cosine decay)."""
    recipe = recipe or SourceRecipe(epochs=epochs, lr=lr)
    aug = aug or AugmentConfig()
    if len(source_train) == 0:
        raise TrainingError("source training set is empty")
    x, y = dataset_images(source_train, aug)
    if (y < 0).any() or (y >= model.spec.n_classes).any():
        raise TrainingError("source labels outside the model vocabulary")

    gen = torch.Generator().manual_seed(seed)
    dev = runtime_device()
    model.to(dev)
    model.body.requires_grad_(True)
    model.head.requires_grad_(True)
    opt = torch.optim.SGD(
        model.parameters(), lr=lr, momentum=recipe.momentum, weight_decay=recipe.weight_decay, nesterov=True
    )
    steps_per_epoch = max(1, math.ceil(len(x) / recipe.batch_size))
    total = epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / max(total, 1))))
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for s in range(steps_per_epoch):
            idx = perm[s * recipe.batch_size : (s + 1) * recipe.batch_size]
            if len(idx) < 2:
                continue
            xb = train_transform(x[idx], aug, gen) if recipe.augmentation else eval_transform(x[idx], aug)
            loss = F.cross_entropy(model(xb.to(dev)), y[idx].to(dev), label_smoothing=recipe.label_smoothing)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
    model.eval()

    logits, _ = predict(model, x, aug)
    train_acc = float((logits.argmax(1) == y).float().mean())
    model.vocabulary = source_train.vocabulary
    model.meta.update(
        source_domain=source_train.domain_id,
        training_seed=seed,
        source_train_accuracy=train_acc,
        source_recipe=asdict(recipe),
    )
    return make_checkpoint(model)


# ---------------------------------------------------------------- checkpoints


def make_checkpoint(model: AdaptableModel) -> Checkpoint:
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "spec": asdict(model.spec),
        "vocabulary": list(model.vocabulary) if model.vocabulary is not None else None,
        **model.meta,
    }
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    return Checkpoint(state, manifest)


def save_checkpoint(model: AdaptableModel | Checkpoint, path: str | Path) -> Path:
    ckpt = model if isinstance(model, Checkpoint) else make_checkpoint(model)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt.state_dict, path / "model.pt")
    (path / "manifest.json").write_text(json.dumps(ckpt.manifest, indent=2, sort_keys=True) + "\n")
    return path


def model_from_checkpoint(ckpt: Checkpoint) -> AdaptableModel:
    man = ckpt.manifest
    try:
        spec = ModelSpec(**{**man["spec"], "pretrained_origin": man["spec"]["pretrained_origin"]})
    except (KeyError, TypeError, ModelError) as e:
        raise CheckpointError(f"invalid manifest spec: {e}") from e
    vocab = man.get("vocabulary")
    if vocab is not None and len(vocab) != spec.n_classes:
        raise CheckpointError(f"manifest vocabulary has {len(vocab)} entries but n_classes={spec.n_classes}")
    # rebuild without fetching generic weights; the archive holds every tensor
    model = build_model(ModelSpec(spec.backbone_id, spec.n_classes, spec.bottleneck_dim, "random"))
    model.spec = spec
    try:
        model.load_state_dict(ckpt.state_dict, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"parameter archive does not match manifest spec: {e}") from e
    model.vocabulary = tuple(vocab) if vocab is not None else None
    model.meta = {k: v for k, v in man.items() if k not in ("artifact_version", "spec", "vocabulary")}
    model.eval()
    return model


def load_checkpoint(path: str | Path) -> AdaptableModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        state = torch.load(path / "model.pt", map_location="cpu", weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"incomplete checkpoint at {path}: {e}") from e
    return model_from_checkpoint(Checkpoint(state, manifest))
