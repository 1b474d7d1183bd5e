# Copyright (C) 2026 The clora-compose Authors
# SPDX-License-Identifier: Apache-2.0

"""Self-supervised ViT features for the evaluation harness.

Needs torch, transformers and locally available DINO weights. Construction
raises CloraError(kind=ExtractorUnavailable) when any of them is missing.
"""

import numpy as np

from ._core import CloraError, ErrorKind, FeatureExtractor

DEFAULT_MODEL = "facebook/dino-vits16"


def _unavailable(reason):
    err = CloraError("ExtractorUnavailable: " + reason)
    err.kind = ErrorKind.ExtractorUnavailable
    return err


class DinoExtractor(FeatureExtractor):
    def __init__(self, model=DEFAULT_MODEL, local_files_only=True):
        FeatureExtractor.__init__(self)
        try:
            import torch
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as e:
            raise _unavailable(f"missing dependency ({e.name})") from e
        try:
            self._processor = AutoImageProcessor.from_pretrained(model, local_files_only=local_files_only)
            self._model = AutoModel.from_pretrained(model, local_files_only=local_files_only).eval()
        except (OSError, ValueError) as e:
            raise _unavailable(f"cannot load {model}: {e}") from e
        self._torch = torch

    def name(self):
        return "dino"

    def features(self, image):
        pixels = image.to_array()
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[:, :, None], 3, axis=2)
        inputs = self._processor(images=pixels, return_tensors="pt")
        with self._torch.no_grad():
            out = self._model(**inputs)
        # CLS token of the last layer.
        return out.last_hidden_state[0, 0].double().numpy()
