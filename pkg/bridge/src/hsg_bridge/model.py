"""Noise-prediction models the bridge can serve.

`TinyCondDenoiser` is a small fully-convolutional torch network conditioned on
the 13-channel control stack and a sinusoidal time embedding. It stands in for
a pretrained conditional text-to-image model at desk scale: weights are loaded
from a checkpoint file (create one with `create_tiny_checkpoint`), the forward
pass is a real conditional noise prediction, and classifier-free guidance is
applied by a second pass with the condition zeroed.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .protocol import COND_CHANNELS

TEMB_DIM = 16


def _time_embedding(t: float) -> torch.Tensor:
    freqs = 2.0 ** torch.arange(TEMB_DIM // 2, dtype=torch.float32)
    ang = math.pi * t * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)])


class TinyCondDenoiser(nn.Module):
    """Three-layer conv net over [x_t | condition | broadcast time embedding]."""

    def __init__(self, image_channels: int = 3, hidden: int = 32):
        super().__init__()
        self.image_channels = image_channels
        in_ch = image_channels + COND_CHANNELS + TEMB_DIM
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, image_channels, 3, padding=1),
        )

    @torch.no_grad()
    def predict(self, x_t: np.ndarray, t: float, cond: np.ndarray,
                guidance: float = 1.0) -> np.ndarray:
        """eps_hat for a (C, H, W) float32 input; guidance > 1 mixes a
        condition-free pass classifier-free style."""
        device = next(self.parameters()).device
        x = torch.from_numpy(np.ascontiguousarray(x_t, dtype=np.float32)).to(device)
        c = torch.from_numpy(np.ascontiguousarray(cond, dtype=np.float32)).to(device)
        temb = _time_embedding(t).to(device)[:, None, None].expand(-1, *x.shape[1:])

        def run(cond_tensor):
            inp = torch.cat([x, cond_tensor, temb], dim=0)[None]
            return self.net(inp)[0]

        eps = run(c)
        if guidance != 1.0:
            eps_uncond = run(torch.zeros_like(c))
            eps = eps_uncond + guidance * (eps - eps_uncond)
        return eps.cpu().numpy().astype(np.float32)


def create_tiny_checkpoint(path, image_channels: int = 3, seed: int = 0) -> None:
    """Write a deterministic randomly-initialized checkpoint to disk."""
    torch.manual_seed(seed)
    model = TinyCondDenoiser(image_channels=image_channels)
    torch.save({"image_channels": image_channels,
                "state_dict": model.state_dict()}, path)


def load_model(path, device: str = "cpu") -> TinyCondDenoiser:
    """Load a TinyCondDenoiser checkpoint; raises on unreadable weights."""
    blob = torch.load(Path(path), map_location=device, weights_only=True)
    model = TinyCondDenoiser(image_channels=int(blob["image_channels"]))
    model.load_state_dict(blob["state_dict"])
    model.to(device)
    model.eval()
    return model
