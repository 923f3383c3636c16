"""Concept classifier for generated toy images; also the feature extractor for drift."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ToyClassifier(nn.Module):
    def __init__(self, n_classes: int = 13, image_channels: int = 3):
        super().__init__()
        self.n_classes = n_classes
        self.conv1 = nn.Conv2d(image_channels, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.fc1 = nn.Linear(32 * 2 * 2, 64)
        self.fc2 = nn.Linear(64, n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        return F.relu(self.fc1(h.flatten(1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.features(x))

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).argmax(dim=1)

    @torch.no_grad()
    def confidences(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward(x), dim=1)
