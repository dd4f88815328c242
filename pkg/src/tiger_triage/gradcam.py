"""Gradient-weighted class activation maps and their overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .dataset import CLASS_NAMES
from .model import PREDICTED, ClassifierNet, LayerActivations, forward_with_capture
from .preprocess import ImageTensor, Space

COLORMAP = "jet"
BLEND_ALPHA = 0.4


@dataclass
class Heatmap:
    values: np.ndarray  # h x w, non-negative
    layer: str
    class_index: int
    upsampled: bool = False

    def __post_init__(self):
        if (self.values < 0).any():
            raise ValueError("heatmap values must be non-negative")


def alpha_weights(acts: LayerActivations) -> np.ndarray:
    """Per-channel importance: spatial mean of the class-score gradient."""
    return acts.dA.mean(axis=(1, 2))


def heatmap(acts: LayerActivations) -> Heatmap:
    alphas = alpha_weights(acts)
    cam = np.tensordot(alphas, acts.A, axes=1)
    return Heatmap(np.maximum(cam, 0.0), acts.layer, acts.class_index)


def upsample(hm: Heatmap, size=(224, 224)) -> Heatmap:
    t = torch.from_numpy(np.asarray(hm.values, dtype=np.float64))[None, None]
    up = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()
    # bilinear weights are convex, so this only removes rounding noise
    return Heatmap(np.maximum(up, 0.0), hm.layer, hm.class_index, upsampled=True)


def normalize_for_display(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]. A constant positive map becomes all ones, all-zero stays zero."""
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        return (values - lo) / (hi - lo)
    return np.ones_like(values) if hi > 0 else np.zeros_like(values)


def upsample_overlay(hm: Heatmap, img: ImageTensor) -> np.ndarray:
    """Blend the colormapped heatmap over the raw image; returns H x W x 3 uint8."""
    if img.space is not Space.RAW:
        raise ValueError("overlays are drawn on raw-pixel images")
    size = img.shape[1:]
    up = hm if hm.upsampled and hm.values.shape == size else upsample(hm, size)
    color = colormaps[COLORMAP](normalize_for_display(up.values))[..., :3]
    base = np.clip(img.data.transpose(1, 2, 0), 0.0, 1.0)
    out = (1.0 - BLEND_ALPHA) * base + BLEND_ALPHA * color
    return np.round(out * 255.0).astype(np.uint8)


def gradcam(net: ClassifierNet, img: torch.Tensor, layer: str = "deep",
            class_index=PREDICTED, target: str = "logit") -> Heatmap:
    return heatmap(forward_with_capture(net, img, layer, class_index, target))


def multi_layer_cams(net: ClassifierNet, img: torch.Tensor, layers=("shallow", "middle", "deep"),
                     class_index=PREDICTED, target: str = "logit") -> list[Heatmap]:
    """One heatmap per layer, all for the same class (the predicted one by default)."""
    names = [net.resolve_layer(layer) for layer in layers]
    if class_index == PREDICTED:
        with torch.no_grad():
            net.eval()
            logits = net(img[None] if img.ndim == 3 else img)
        class_index = int(torch.argmax(logits[0]))
    return [gradcam(net, img, name, class_index, target) for name in names]


def export(hm: Heatmap, img: ImageTensor, out_dir, record_id: str, **extra) -> dict:
    """Write ``<id>_<layer>_<class>.png`` overlay plus raw ``.npy`` grid and JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{record_id}_{hm.layer}_{CLASS_NAMES[hm.class_index]}"
    png = out_dir / f"{stem}.png"
    Image.fromarray(upsample_overlay(hm, img)).save(png)
    np.save(out_dir / f"{stem}.npy", hm.values)
    meta = {"layer": hm.layer, "class_index": hm.class_index, "shape": list(hm.values.shape),
            "upsampled": hm.upsampled, "record_id": record_id, **extra}
    (out_dir / f"{stem}.json").write_text(json.dumps(meta, indent=2))
    return {"png": str(png), "npy": str(out_dir / f"{stem}.npy"), **meta}
