# Copyright (C) 2026 The clora-compose Authors
# SPDX-License-Identifier: Apache-2.0

"""Contrastive multi-LoRA composition for diffusion models."""

from ._core import *  # noqa: F401,F403
from ._core import __version__  # noqa: F401
