"""Building blocks: conv stacks, PointNet pieces, STNkD and edge convolution."""

from __future__ import annotations

import torch
import torch.nn as nn

from tractokit.errors import InvalidInputError


def xavier_init(module: nn.Module) -> nn.Module:
    """Xavier-uniform weights and zero biases for every conv and linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


def _expect(x: torch.Tensor, ndim: int, last: int | None, what: str):
    if x.dim() != ndim or (last is not None and x.shape[-1] != last):
        raise InvalidInputError(f"{what}: unexpected input shape {tuple(x.shape)}")


class ConvBlock2d(nn.Sequential):
    """[Conv2D 3x3, ReLU] x 2 with same padding."""

    def __init__(self, c_in, c_out):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c_out, c_out, 3, padding=1), nn.ReLU(),
        )


class StreamlineCNN(nn.Module):
    """Four conv blocks, each followed by 2x2 max pooling; dropout after the second pool.

    Takes channels-last descriptors ``(B, H, W, 3)`` and returns the pooled feature
    map ``(B, C, H', W')``.
    """

    def __init__(self, channels=(32, 64, 128, 256), dropout=0.5):
        super().__init__()
        c = (3,) + tuple(channels)
        self.blocks = nn.ModuleList(ConvBlock2d(c[i], c[i + 1]) for i in range(4))
        self.pool = nn.MaxPool2d(2)
        self.dropout = nn.Dropout(dropout)
        self.out_channels = c[-1]

    def forward(self, x):
        _expect(x, 4, 3, "StreamlineCNN")
        x = x.permute(0, 3, 1, 2)
        for i, block in enumerate(self.blocks):
            x = self.pool(block(x))
            if i == 1:
                x = self.dropout(x)
        return x


def conv_bn(c_in, c_out, relu=True):
    layers = [nn.Conv1d(c_in, c_out, 1), nn.BatchNorm1d(c_out, eps=1e-5, momentum=0.1)]
    if relu:
        layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class STNkD(nn.Module):
    """Learned k x k feature transform; its output starts at the identity."""

    def __init__(self, k=64, widths=(64, 128, 1024), fc=(512, 256)):
        super().__init__()
        self.k = k
        dims = (k,) + tuple(widths)
        self.convs = nn.Sequential(*[conv_bn(dims[i], dims[i + 1]) for i in range(len(widths))])
        fdims = (widths[-1],) + tuple(fc)
        mlp = []
        for i in range(len(fc)):
            mlp += [nn.Linear(fdims[i], fdims[i + 1]), nn.BatchNorm1d(fdims[i + 1]), nn.ReLU()]
        self.mlp = nn.Sequential(*mlp)
        self.out = nn.Linear(fdims[-1], k * k)
        xavier_init(self)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.register_buffer("identity", torch.eye(k).flatten(), persistent=False)

    def forward(self, x):
        # x: (B, k, N)
        _expect(x, 3, None, "STNkD")
        if x.shape[1] != self.k:
            raise InvalidInputError(f"STNkD expects {self.k} channels, got {x.shape[1]}")
        h = self.convs(x).amax(dim=2)
        h = self.out(self.mlp(h)) + self.identity.to(h.dtype)
        return h.view(-1, self.k, self.k)


class PointNetEncoder(nn.Module):
    """Shared per-point MLP with feature alignment and a global max pool.

    ``(B, N, 3) -> (B, channels[-1])``.
    """

    def __init__(self, channels=(64, 128, 256, 1024), stn_widths=(64, 128, 1024), stn_fc=(512, 256)):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.conv1 = conv_bn(3, c0)
        self.stn = STNkD(c0, stn_widths, stn_fc)
        self.conv2 = conv_bn(c0, c1)
        self.conv3 = conv_bn(c1, c2)
        self.conv4 = conv_bn(c2, c3, relu=False)
        self.out_dim = c3
        xavier_init(self.conv1)
        for m in (self.conv2, self.conv3, self.conv4):
            xavier_init(m)

    def forward(self, pts):
        _expect(pts, 3, 3, "PointNetEncoder")
        if pts.shape[1] < 1:
            raise InvalidInputError("PointNetEncoder needs at least one point")
        x = self.conv1(pts.transpose(1, 2))
        trans = self.stn(x)
        x = torch.bmm(x.transpose(1, 2), trans).transpose(1, 2)
        x = self.conv4(self.conv3(self.conv2(x)))
        return x.amax(dim=2)


class MiniPointNet(nn.Module):
    """Per-patch tokenizer: ``(B, P, L, 3) -> (B, P, dims[-1])``, max over the L points."""

    def __init__(self, dims=(64, 128, 256)):
        super().__init__()
        d = (3,) + tuple(dims)
        layers = []
        for i in range(len(dims)):
            last = i == len(dims) - 1
            layers.append(conv_bn(d[i], d[i + 1], relu=not last) if not last else nn.Conv1d(d[i], d[i + 1], 1))
        self.net = nn.Sequential(*layers)
        self.out_dim = d[-1]
        xavier_init(self)

    def forward(self, patches):
        _expect(patches, 4, 3, "MiniPointNet")
        b, p, l, _ = patches.shape
        x = patches.reshape(b * p, l, 3).transpose(1, 2)
        return self.net(x).amax(dim=2).view(b, p, -1)


def knn_graph(x: torch.Tensor, k: int) -> torch.Tensor:
    """Indices ``(B, N, k)`` of each row's nearest rows in feature space (self included)."""
    with torch.no_grad():
        sq = (x * x).sum(-1)
        d = sq[:, :, None] + sq[:, None, :] - 2 * x @ x.transpose(1, 2)
        return d.topk(min(k, x.shape[1]), dim=-1, largest=False).indices


class EdgeConv(nn.Module):
    """Edge convolution over a feature-space kNN graph.

    Edge features ``concat(x_j - x_i, x_i)`` go through a shared two-layer MLP and
    are max-reduced over the ``k`` neighbours. ``(B, N, C_in) -> (B, N, C_out)``.
    """

    def __init__(self, c_in, c_out, k=4):
        super().__init__()
        self.k = k
        self.mlp = nn.Sequential(
            nn.Conv2d(2 * c_in, c_out, 1, bias=False), nn.BatchNorm2d(c_out), nn.LeakyReLU(0.2),
            nn.Conv2d(c_out, c_out, 1, bias=False), nn.BatchNorm2d(c_out), nn.LeakyReLU(0.2),
        )
        xavier_init(self)

    def forward(self, x):
        _expect(x, 3, None, "EdgeConv")
        b, n, c = x.shape
        idx = knn_graph(x, self.k)
        k = idx.shape[-1]
        nbrs = torch.gather(x[:, None].expand(b, n, n, c), 2, idx[..., None].expand(b, n, k, c))
        centre = x[:, :, None, :].expand(b, n, k, c)
        edge = torch.cat([nbrs - centre, centre], dim=-1).permute(0, 3, 1, 2)
        return self.mlp(edge).amax(dim=-1).transpose(1, 2)


class DGCNNStack(nn.Module):
    """Linear projection, a chain of edge convolutions, and the multi-scale concat."""

    def __init__(self, c_in, proj, widths=(256, 512, 512, 1024), k=4):
        super().__init__()
        self.proj = nn.Linear(c_in, proj)
        dims = (proj,) + tuple(widths)
        self.convs = nn.ModuleList(EdgeConv(dims[i], dims[i + 1], k) for i in range(len(widths)))
        self.out_dim = sum(widths)
        xavier_init(self.proj)

    def forward(self, x):
        h = self.proj(x)
        outs = []
        for conv in self.convs:
            h = conv(h)
            outs.append(h)
        return torch.cat(outs, dim=-1)


def mlp(dims, final_relu=False) -> nn.Sequential:
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2 or final_relu:
            layers.append(nn.ReLU())
    return xavier_init(nn.Sequential(*layers))
