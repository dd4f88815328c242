"""Backbone + classifier head assembly, activation capture and checkpoints."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torchvision

from .errors import ShapeMismatch, UnknownFamily, UnknownLayer, WeightsUnavailable
from .preprocess import INPUT_SIZE, NormStats

FAMILIES = ("vgg16", "resnet50", "tinycnn")
TAGS = ("shallow", "middle", "deep")
PREDICTED = "predicted"
CACHE_ENV = "TIGER_TRIAGE_CACHE"


class FreezePolicy(str, Enum):
    NONE = "none"
    FEATURES_ONLY = "features_only"
    UP_TO_BLOCK_N = "up_to_block_n"


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "vgg16"
    pretrained: bool = True
    freeze_policy: FreezePolicy = FreezePolicy.NONE
    freeze_blocks: int = 0  # only read by up_to_block_n

    def __post_init__(self):
        object.__setattr__(self, "freeze_policy", FreezePolicy(self.freeze_policy))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze_policy"] = self.freeze_policy.value
        return d


@dataclass
class LayerActivations:
    layer: str
    A: np.ndarray   # K x H' x W'
    dA: np.ndarray  # d score_c / d A, same shape
    class_index: int
    probs: np.ndarray | None = None

    def __post_init__(self):
        if self.A.shape != self.dA.shape or self.A.ndim != 3:
            raise ValueError(f"activation/gradient shape mismatch: {self.A.shape} vs {self.dA.shape}")


class ClassifierNet(nn.Module):
    """Convolutional trunk followed by a two-layer classification head.

    ``forward`` returns pre-softmax class scores; use :func:`forward` for
    probabilities. ``capture_points`` maps layer names to the modules whose
    outputs can be captured, ordered from input to output.
    """

    def __init__(self, features: nn.Module, head: nn.Module, capture_points, layer_tags,
                 spec: BackboneSpec, blocks=(), input_size=INPUT_SIZE,
                 dropout_p: float = 0.5, hidden: int = 512):
        super().__init__()
        self.features = features
        self.head = head
        self.capture_points = OrderedDict(capture_points)
        self.layer_tags = dict(layer_tags)
        self.spec = spec
        self.blocks = list(blocks)
        self.input_size = tuple(input_size)
        self.dropout_p = dropout_p
        self.hidden = hidden
        self._frozen: list[nn.Module] = []

    @property
    def named_layers(self) -> list[tuple[str, str | None]]:
        return [(name, self.layer_tags.get(name)) for name in self.capture_points]

    def resolve_layer(self, layer: str) -> str:
        if layer in self.capture_points:
            return layer
        for name, tag in self.layer_tags.items():
            if tag == layer:
                return name
        raise UnknownLayer(f"unknown layer {layer!r}; available: {list(self.capture_points)}")

    def forward(self, x):
        return self.head(self.features(x))

    def embed(self, x):
        return self.features(x)

    def freeze(self, modules) -> None:
        self._frozen = list(modules)
        for m in self._frozen:
            for p in m.parameters():
                p.requires_grad_(False)
        self.train(self.training)

    @property
    def features_frozen(self) -> bool:
        return all(not p.requires_grad for p in self.features.parameters())

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen parts keep eval behaviour (no batch-norm statistic updates)
        for m in self._frozen:
            m.eval()
        return self

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad or not trainable_only)


def _no_inplace(module: nn.Module) -> None:
    # forward hooks must see tensors that nothing rewrites afterwards
    for m in module.modules():
        if isinstance(m, nn.ReLU):
            m.inplace = False


def _load_weights(factory, weights):
    cache = os.environ.get(CACHE_ENV)
    try:
        model = factory(weights=None)
        kwargs = {"progress": False}
        if cache:
            kwargs["model_dir"] = cache
        model.load_state_dict(weights.get_state_dict(**kwargs))
    except Exception as exc:
        raise WeightsUnavailable(
            f"could not obtain pretrained weights {weights}: {exc}. "
            f"Place the file in ${CACHE_ENV} or build with pretrained=False.") from exc
    return model


def _vgg16(pretrained: bool):
    factory = torchvision.models.vgg16
    vgg = (_load_weights(factory, torchvision.models.VGG16_Weights.IMAGENET1K_V1)
           if pretrained else factory(weights=None))
    _no_inplace(vgg)
    capture, blocks, current = OrderedDict(), [], []
    block, conv_in_block, pending = 1, 0, None
    for idx, m in enumerate(vgg.features):
        current.append(m)
        if isinstance(m, nn.Conv2d):
            conv_in_block += 1
            pending = f"conv{block}_{conv_in_block}"
        elif isinstance(m, nn.ReLU) and pending:
            capture[pending] = m  # rectified output of the named convolution
            pending = None
        elif isinstance(m, nn.MaxPool2d):
            blocks.append(nn.ModuleList(current))
            current, block, conv_in_block = [], block + 1, 0
    features = nn.Sequential(OrderedDict(
        [("trunk", vgg.features), ("avgpool", vgg.avgpool), ("flatten", nn.Flatten())]))
    tags = {"conv2_2": "shallow", "conv4_3": "middle", "conv5_3": "deep"}
    return features, capture, tags, blocks, 512 * 7 * 7


def _resnet50(pretrained: bool):
    factory = torchvision.models.resnet50
    net = (_load_weights(factory, torchvision.models.ResNet50_Weights.IMAGENET1K_V2)
           if pretrained else factory(weights=None))
    _no_inplace(net)
    features = nn.Sequential(OrderedDict([
        ("conv1", net.conv1), ("bn1", net.bn1), ("relu", net.relu), ("maxpool", net.maxpool),
        ("layer1", net.layer1), ("layer2", net.layer2), ("layer3", net.layer3),
        ("layer4", net.layer4), ("avgpool", net.avgpool), ("flatten", nn.Flatten()),
    ]))
    capture = OrderedDict([("conv1", net.relu), ("layer1", net.layer1), ("layer2", net.layer2),
                           ("layer3", net.layer3), ("layer4", net.layer4)])
    tags = {"layer2": "shallow", "layer3": "middle", "layer4": "deep"}
    blocks = [nn.ModuleList([net.conv1, net.bn1]), net.layer1, net.layer2, net.layer3, net.layer4]
    return features, capture, tags, blocks, 2048


def _tinycnn(pretrained: bool):
    # small trunk for CPU smoke runs; there are no pretrained weights for it
    if pretrained:
        raise WeightsUnavailable("tinycnn has no pretrained weights")
    layers = OrderedDict([
        ("conv1", nn.Conv2d(3, 8, 3, padding=1)), ("relu1", nn.ReLU()), ("pool1", nn.MaxPool2d(2)),
        ("conv2", nn.Conv2d(8, 16, 3, padding=1)), ("relu2", nn.ReLU()), ("pool2", nn.MaxPool2d(2)),
        ("conv3", nn.Conv2d(16, 16, 3, padding=1)), ("relu3", nn.ReLU()),
        ("avgpool", nn.AdaptiveAvgPool2d((4, 4))), ("flatten", nn.Flatten()),
    ])
    features = nn.Sequential(layers)
    capture = OrderedDict([("conv1", layers["relu1"]), ("conv2", layers["relu2"]),
                           ("conv3", layers["relu3"])])
    tags = {"conv1": "shallow", "conv2": "middle", "conv3": "deep"}
    blocks = [nn.ModuleList([layers["conv1"]]), nn.ModuleList([layers["conv2"]]),
              nn.ModuleList([layers["conv3"]])]
    return features, capture, tags, blocks, 16 * 4 * 4


_BUILDERS = {"vgg16": _vgg16, "resnet50": _resnet50, "tinycnn": _tinycnn}


def make_head(in_features: int, hidden: int = 512, dropout_p: float = 0.5,
              num_classes: int = 2) -> nn.Sequential:
    return nn.Sequential(OrderedDict([
        ("fc1", nn.Linear(in_features, hidden)), ("relu", nn.ReLU()),
        ("dropout", nn.Dropout(dropout_p)), ("fc2", nn.Linear(hidden, num_classes)),
    ]))


def build(spec: BackboneSpec, dropout_p: float = 0.5, seed: int = 42, hidden: int = 512,
          input_size=INPUT_SIZE) -> ClassifierNet:
    """Assemble backbone and head; all random initialization is derived from ``seed``."""
    if spec.family not in _BUILDERS:
        raise UnknownFamily(f"unknown backbone family {spec.family!r}; choose from {FAMILIES}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        features, capture, tags, blocks, width = _BUILDERS[spec.family](spec.pretrained)
        torch.manual_seed(seed)
        head = make_head(width, hidden, dropout_p)
    net = ClassifierNet(features, head, capture, tags, spec, blocks, input_size, dropout_p, hidden)
    if spec.freeze_policy is FreezePolicy.FEATURES_ONLY:
        net.freeze([net.features])
    elif spec.freeze_policy is FreezePolicy.UP_TO_BLOCK_N:
        net.freeze(net.blocks[:spec.freeze_blocks])
    return net


def _check_batch(net: ClassifierNet, batch: torch.Tensor) -> None:
    if batch.ndim != 4 or batch.shape[1] != 3 or tuple(batch.shape[2:]) != net.input_size:
        raise ShapeMismatch(
            f"expected N x 3 x {net.input_size[0]} x {net.input_size[1]}, got {tuple(batch.shape)}")


def forward(net: ClassifierNet, batch: torch.Tensor) -> torch.Tensor:
    """Class probabilities (N x 2) in evaluation mode."""
    _check_batch(net, batch)
    net.eval()
    with torch.no_grad():
        return torch.softmax(net(batch), dim=1)


def forward_with_capture(net: ClassifierNet, img: torch.Tensor, layer: str,
                         class_index=PREDICTED, target: str = "logit") -> LayerActivations:
    """Capture a layer's activations and the gradient of one class score w.r.t. them.

    ``target`` selects the differentiated quantity: the pre-softmax score
    (``"logit"``) or the softmax probability (``"probability"``). With
    ``class_index="predicted"`` the argmax class is used, ties going to the
    lower index.
    """
    if img.ndim == 3:
        img = img[None]
    _check_batch(net, img)
    if img.shape[0] != 1:
        raise ShapeMismatch("capture works on a single image")
    name = net.resolve_layer(layer)
    module = net.capture_points[name]
    store = {}
    owner = threading.get_ident()

    def hook(_module, _inputs, output):
        if threading.get_ident() != owner:
            return None  # another thread sharing the net
        # cut the graph here so frozen layers upstream need no gradient
        leaf = output.detach().requires_grad_(True)
        store["A"] = leaf
        return leaf

    was_training = net.training
    net.eval()
    handle = module.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            logits = net(img.detach())
            probs = torch.softmax(logits, dim=1)
            c = int(torch.argmax(logits[0])) if class_index == PREDICTED else int(class_index)
            if c not in (0, 1):
                raise ValueError(f"class_index must be 0, 1 or {PREDICTED!r}")
            score = logits[0, c] if target == "logit" else probs[0, c]
            (grad,) = torch.autograd.grad(score, store["A"])
    finally:
        handle.remove()
        net.train(was_training)
    A = store["A"].detach()[0].double().numpy()
    return LayerActivations(name, A, grad[0].double().numpy(), c, probs.detach()[0].double().numpy())


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Checkpoint:
    net: ClassifierNet
    norm_stats: NormStats
    meta: dict


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(net: ClassifierNet, path, *, norm_stats: NormStats, config_hash: str = "",
                    epoch: int | None = None, val_accuracy: float | None = None,
                    seed: int | None = None, **extra) -> dict:
    """Write weights to ``path`` and a JSON metadata sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "state_dict": net.state_dict(),
        "spec": net.spec.to_dict(),
        "dropout_p": net.dropout_p,
        "hidden": net.hidden,
        "input_size": list(net.input_size),
        "norm_stats": norm_stats.to_dict(),
        "config_hash": config_hash,
    }, path)
    meta = {
        "family": net.spec.family,
        "epoch": epoch,
        "val_accuracy": val_accuracy,
        "seed": seed,
        "config_hash": config_hash,
        "model_hash": file_hash(path),
        "input_size": list(net.input_size),
        "norm_stats": norm_stats.to_dict(),
        **extra,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return meta


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    spec = BackboneSpec(**{**blob["spec"], "pretrained": False})
    net = build(spec, dropout_p=blob["dropout_p"], hidden=blob["hidden"],
                input_size=tuple(blob["input_size"]))
    net.load_state_dict(blob["state_dict"])
    net.eval()
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    meta.setdefault("model_hash", file_hash(path))
    meta.setdefault("config_hash", blob.get("config_hash", ""))
    return Checkpoint(net, NormStats.from_dict(blob["norm_stats"]), meta)
