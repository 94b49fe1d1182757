import torch.nn as nn


class MeanColour(nn.Module):
    def __init__(self, feature_dim):
        super().__init__()
        self.proj = nn.Linear(3, feature_dim)
        self.feature_dim = feature_dim

    def forward(self, x):
        return self.proj(x.mean(dim=(-2, -1)))


def mean_colour_backbone(feature_dim):
    return MeanColour(feature_dim)
