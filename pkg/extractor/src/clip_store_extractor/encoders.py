"""Encoder backends.

Real extraction uses pretrained contrastive image/text encoder pairs, looked
up by the usual short names (rn50, rn101, vit-b-32, vit-b-16, vit-l-14).
ResNet variants need the open_clip package; ViT variants work through either
open_clip or transformers.  A deterministic offline backend
(``mock:<dim>[:<seed>]``) projects pixels and prompt bytes through seeded
Gaussian maps, so the extraction pipeline and the store format stay fully
testable without checkpoints or a network.

All backends return raw encoder outputs; nothing is normalized here.
"""

from __future__ import annotations

import hashlib
import importlib.util

import numpy as np
from PIL import Image


class EncoderError(RuntimeError):
    """Unknown backbone name or unusable checkpoint."""


OPEN_CLIP_NAMES = {
    "rn50": ("RN50", "openai"),
    "rn101": ("RN101", "openai"),
    "vit-b-32": ("ViT-B-32", "openai"),
    "vit-b-16": ("ViT-B-16", "openai"),
    "vit-l-14": ("ViT-L-14", "openai"),
}

TRANSFORMERS_NAMES = {
    "vit-b-32": "openai/clip-vit-base-patch32",
    "vit-b-16": "openai/clip-vit-base-patch16",
    "vit-l-14": "openai/clip-vit-large-patch14",
}

MOCK_IMAGE_SIDE = 32


class MockEncoder:
    """Seeded random-projection encoder for offline tests.

    Images are resized to a fixed raster and linearly projected; prompts are
    hashed into a seeded Gaussian vector.  Pure numpy, bit-reproducible, and
    intentionally unnormalized.
    """

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise EncoderError(f"mock dimension must be >= 1, got {dim}")
        self.name = f"mock:{dim}:{seed}"
        self.dim = dim
        rng = np.random.Generator(np.random.Philox(key=seed))
        n_pixels = MOCK_IMAGE_SIDE * MOCK_IMAGE_SIDE * 3
        self._projection = rng.standard_normal((n_pixels, dim)) / np.sqrt(n_pixels)
        self._seed = seed

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        rows = []
        for image in images:
            raster = image.convert("RGB").resize((MOCK_IMAGE_SIDE, MOCK_IMAGE_SIDE))
            pixels = np.asarray(raster, dtype=np.float64).reshape(-1) / 255.0
            rows.append(pixels @ self._projection)
        return np.stack(rows).astype(np.float32)

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        rows = []
        for prompt in prompts:
            digest = hashlib.sha256(prompt.encode("utf-8")).digest()
            key = int.from_bytes(digest[:8], "little") ^ self._seed
            rng = np.random.Generator(np.random.Philox(key=key))
            rows.append(rng.standard_normal(self.dim))
        return np.stack(rows).astype(np.float32)


class OpenClipEncoder:
    """Pretrained encoder pair via open_clip, when installed and cached."""

    def __init__(self, name: str, device: str = "cpu"):
        if importlib.util.find_spec("open_clip") is None:
            raise EncoderError(
                f"backbone {name!r} needs the open-clip-torch package"
            )
        import open_clip
        import torch

        arch, pretrained = OPEN_CLIP_NAMES[name]
        try:
            model, _, preprocess = open_clip.create_model_and_transforms(
                arch, pretrained=pretrained
            )
        except Exception as exc:  # checkpoint download/load failure
            raise EncoderError(f"cannot load checkpoint for {name!r}: {exc}") from exc
        self.name = name
        self._torch = torch
        self._model = model.to(device).eval()
        self._preprocess = preprocess
        self._tokenize = open_clip.get_tokenizer(arch)
        self._device = device

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        torch = self._torch
        batch = torch.stack([self._preprocess(img.convert("RGB")) for img in images])
        with torch.no_grad():
            features = self._model.encode_image(batch.to(self._device))
        return features.cpu().numpy().astype(np.float32)

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        torch = self._torch
        tokens = self._tokenize(prompts)
        with torch.no_grad():
            features = self._model.encode_text(tokens.to(self._device))
        return features.cpu().numpy().astype(np.float32)


class TransformersClipEncoder:
    """Pretrained ViT encoder pair via the transformers CLIP implementation."""

    def __init__(self, name: str, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderError(f"backbone {name!r} needs torch + transformers") from exc
        model_id = TRANSFORMERS_NAMES[name]
        try:
            self._model = CLIPModel.from_pretrained(model_id).to(device).eval()
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:  # checkpoint download/load failure
            raise EncoderError(f"cannot load checkpoint for {name!r}: {exc}") from exc
        self.name = name
        self._torch = torch
        self._device = device

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        torch = self._torch
        inputs = self._processor(
            images=[img.convert("RGB") for img in images], return_tensors="pt"
        )
        with torch.no_grad():
            features = self._model.get_image_features(
                pixel_values=inputs["pixel_values"].to(self._device)
            )
        return features.cpu().numpy().astype(np.float32)

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        torch = self._torch
        inputs = self._processor(text=prompts, return_tensors="pt", padding=True)
        with torch.no_grad():
            features = self._model.get_text_features(
                input_ids=inputs["input_ids"].to(self._device),
                attention_mask=inputs["attention_mask"].to(self._device),
            )
        return features.cpu().numpy().astype(np.float32)


def make_encoder(name: str, device: str = "cpu"):
    """Build a backend from a backbone identifier."""
    if name.startswith("mock:"):
        parts = name.split(":")
        if len(parts) not in (2, 3):
            raise EncoderError(f"mock backbone must be mock:<dim>[:<seed>], got {name!r}")
        dim = int(parts[1])
        seed = int(parts[2]) if len(parts) == 3 else 0
        return MockEncoder(dim, seed)
    if name in OPEN_CLIP_NAMES and importlib.util.find_spec("open_clip") is not None:
        return OpenClipEncoder(name, device)
    if name in TRANSFORMERS_NAMES:
        return TransformersClipEncoder(name, device)
    if name in OPEN_CLIP_NAMES:
        raise EncoderError(
            f"backbone {name!r} needs the open-clip-torch package (ResNet variants "
            "are not available through transformers)"
        )
    known = sorted(set(OPEN_CLIP_NAMES) | {"mock:<dim>[:<seed>]"})
    raise EncoderError(f"unknown backbone {name!r}; known: {known}")
