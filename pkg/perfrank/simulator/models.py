import math

import torch
from torch import nn


class RelevanceModel(nn.Module):
    """
    Content-based relevance simulator S(x; u*).

    A five-layer ReLU MLP on the concatenation [x, u*] (width 2d), with hidden
    widths 4d, 2d, d, ceil(d/2) and a sigmoid-squashed scalar head.
    """

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        widths = [2 * d, 4 * d, 2 * d, d, math.ceil(d / 2), 1]
        layers: list[nn.Module] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            layers.append(nn.Linear(fan_in, fan_out, dtype=torch.float64))
            layers.append(nn.ReLU())
        # No activation before the sigmoid head
        self.net = nn.Sequential(*layers[:-1])

    @property
    def hidden_widths(self) -> list[int]:
        return [layer.out_features for layer in self.linear_layers()[:-1]]

    def linear_layers(self) -> list[nn.Linear]:
        return [layer for layer in self.net if isinstance(layer, nn.Linear)]

    def layer_shapes(self) -> list[list[int]]:
        return [[layer.out_features, layer.in_features] for layer in self.linear_layers()]

    def logits(self, x: torch.Tensor, u_star: torch.Tensor) -> torch.Tensor:
        x, u_star = torch.broadcast_tensors(x, u_star)
        return self.net(torch.cat([x, u_star], dim=-1)).squeeze(-1)

    def forward(self, x: torch.Tensor, u_star: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x, u_star))

    def freeze(self) -> "RelevanceModel":
        """Put the model in eval mode and stop gradients reaching its weights."""
        self.eval()
        self.requires_grad_(False)
        return self
