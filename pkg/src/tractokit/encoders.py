"""The streamline, cluster and patch encoders, MECL fusion and the classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from tractokit.errors import InvalidInputError
from tractokit.nn import check_finite
from tractokit.nn.layers import DGCNNStack, MiniPointNet, PointNetEncoder, StreamlineCNN, mlp, xavier_init
from tractokit.nn.losses import gumbel_softmax_sample

ENCODERS = ("streamline", "cluster", "patch")


@dataclass
class ModelConfig:
    n_classes: int = 43
    n_s: int = 15
    streamline_channels: tuple = (32, 64, 128, 256)
    dropout: float = 0.5
    cluster_channels: tuple = (64, 128, 256, 1024)
    stn_widths: tuple = (64, 128, 1024)
    stn_fc: tuple = (512, 256)
    p_f: int = 64
    p_local: int = 16
    tokenizer_dims: tuple = (64, 128, 256)
    dgcnn_proj: int = 128
    dgcnn_widths: tuple = (256, 512, 512, 1024)
    dgcnn_k: int = 4
    codebook_size: int = 8192
    decoder_hidden: tuple = (1024, 1024)
    patch_head: tuple = (4096, 1024)
    patch_embedding_source: str = "head"  # or "decoder": max over tokens of the decoder hidden layer
    classifier_hidden: int = 512
    coord_scale: float = 0.02  # mm -> network units for streamlines and clouds
    patch_scale: float = 0.2  # mm -> network units for centred patches

    def __post_init__(self):
        for name in ("streamline_channels", "cluster_channels", "stn_widths", "stn_fc", "tokenizer_dims",
                     "dgcnn_widths", "decoder_hidden", "patch_head"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.patch_embedding_source not in ("head", "decoder"):
            raise InvalidInputError("patch_embedding_source must be 'head' or 'decoder'")

    @property
    def token_dim(self) -> int:
        return self.tokenizer_dims[-1]

    @property
    def widths(self) -> dict:
        patch = self.patch_head[-1] if self.patch_embedding_source == "head" else self.decoder_hidden[-1]
        return {"streamline": self.streamline_channels[-1], "cluster": self.cluster_channels[-1], "patch": patch}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Every width divided by four, a 512-entry codebook and 32 patches."""
        return cls(
            streamline_channels=(8, 16, 32, 64),
            cluster_channels=(16, 32, 64, 256),
            stn_widths=(16, 32, 256),
            stn_fc=(128, 64),
            p_f=32,
            tokenizer_dims=(16, 32, 64),
            dgcnn_proj=32,
            dgcnn_widths=(64, 128, 128, 256),
            codebook_size=512,
            decoder_hidden=(256, 256),
            patch_head=(1024, 256),
            classifier_hidden=128,
        )

    @classmethod
    def for_profile(cls, profile: str) -> "ModelConfig":
        if profile == "desk":
            return cls.desk()
        if profile == "paper":
            return cls.paper()
        raise InvalidInputError(f"unknown profile {profile!r}")


class StreamlineEncoder(nn.Module):
    """Conv stack over fiber descriptors plus a detachable classification head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.features = xavier_init(StreamlineCNN(cfg.streamline_channels, cfg.dropout))
        self.head = xavier_init(nn.Linear(self.features.out_channels, cfg.n_classes))
        self.out_dim = self.features.out_channels

    def embed(self, descriptors: torch.Tensor) -> torch.Tensor:
        n = 2 * self.cfg.n_s
        if descriptors.dim() != 4 or tuple(descriptors.shape[1:]) != (n, n, 3):
            raise InvalidInputError(f"descriptors must be (B, {n}, {n}, 3), got {tuple(descriptors.shape)}")
        fmap = self.features(descriptors * self.cfg.coord_scale)
        # pooled map -> one value per channel
        return check_finite(fmap.amax(dim=(2, 3)), "streamline embedding")

    def forward(self, descriptors):
        return self.head(self.embed(descriptors))


class ClusterEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pointnet = PointNetEncoder(cfg.cluster_channels, cfg.stn_widths, cfg.stn_fc)
        self.out_dim = self.pointnet.out_dim

    def embed(self, clouds: torch.Tensor) -> torch.Tensor:
        if clouds.dim() != 3 or clouds.shape[-1] != 3 or clouds.shape[1] < 1:
            raise InvalidInputError(f"clouds must be (B, n_c>=1, 3), got {tuple(clouds.shape)}")
        return check_finite(self.pointnet(clouds * self.cfg.coord_scale), "cluster embedding")

    forward = embed


class PatchEncoder(nn.Module):
    """Patch tokenizer, discrete VAE (encoder, codebook, decoder) and embedding head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.token_dim
        self.tokenizer = MiniPointNet(cfg.tokenizer_dims)
        self.encoder = DGCNNStack(d, cfg.dgcnn_proj, cfg.dgcnn_widths, cfg.dgcnn_k)
        self.to_logits = xavier_init(nn.Linear(self.encoder.out_dim, cfg.codebook_size))
        self.codebook = nn.Parameter(torch.empty(cfg.codebook_size, d))
        nn.init.xavier_uniform_(self.codebook)
        self.decoder = DGCNNStack(d, cfg.dgcnn_proj, cfg.dgcnn_widths, cfg.dgcnn_k)
        self.decoder_out = xavier_init(nn.Linear(self.decoder.out_dim, d))
        self.reconstruct = mlp((d,) + cfg.decoder_hidden, final_relu=True)
        self.to_points = xavier_init(nn.Linear(cfg.decoder_hidden[-1], cfg.p_local * 3))
        self.head = mlp((cfg.p_f * d,) + cfg.patch_head)
        self.out_dim = cfg.widths["patch"]

    def _check_patches(self, patches):
        shape = (self.cfg.p_f, self.cfg.p_local, 3)
        if patches.dim() != 4 or tuple(patches.shape[1:]) != shape:
            raise InvalidInputError(f"patches must be (B, {shape[0]}, {shape[1]}, 3), got {tuple(patches.shape)}")

    def tokenize(self, patches: torch.Tensor) -> torch.Tensor:
        self._check_patches(patches)
        return self.tokenizer(patches * self.cfg.patch_scale)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Tokens ``(B, p_f, d)`` -> codebook logits ``(B, p_f, V)``."""
        if tokens.dim() != 3 or tokens.shape[-1] != self.cfg.token_dim:
            raise InvalidInputError(f"tokens must be (B, P, {self.cfg.token_dim}), got {tuple(tokens.shape)}")
        return check_finite(self.to_logits(self.encoder(tokens)), "dVAE logits")

    def quantize(self, logits, tau=1.0, generator=None, sample=True) -> torch.Tensor:
        """Code tokens: Gumbel-softmax mixture of codebook rows, or argmax lookup when ``sample`` is off."""
        if sample:
            weights = gumbel_softmax_sample(logits, tau, hard=False, generator=generator)
            return weights @ self.codebook
        return self.codebook[logits.argmax(dim=-1)]

    def decode(self, codes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Code tokens -> (reconstructed patches ``(B, p_f, p_local, 3)`` in mm, decoder hidden features)."""
        if codes.dim() != 3 or codes.shape[-1] != self.cfg.token_dim:
            raise InvalidInputError(f"codes must be (B, P, {self.cfg.token_dim}), got {tuple(codes.shape)}")
        hidden = self.reconstruct(self.decoder_out(self.decoder(codes)))
        pts = self.to_points(hidden).view(codes.shape[0], codes.shape[1], self.cfg.p_local, 3)
        return pts / self.cfg.patch_scale, hidden

    def embed_codes(self, codes: torch.Tensor) -> torch.Tensor:
        if self.cfg.patch_embedding_source == "decoder":
            return self.decode(codes)[1].amax(dim=1)
        return self.head(codes.flatten(1))

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        """Inference path: tokenize, argmax codes, embedding head."""
        codes = self.quantize(self.encode(self.tokenize(patches)), sample=False)
        return check_finite(self.embed_codes(codes), "patch embedding")

    forward = embed


def mecl_concat(embeddings: dict, widths: dict, order=ENCODERS) -> torch.Tensor:
    """Concatenate the present embeddings in fixed (streamline, cluster, patch) order."""
    parts = []
    for name in order:
        if name not in embeddings:
            continue
        e = embeddings[name]
        if e.shape[-1] != widths[name]:
            raise InvalidInputError(f"{name} embedding has width {e.shape[-1]}, expected {widths[name]}")
        parts.append(e)
    if not parts:
        raise InvalidInputError("mecl_concat needs at least one embedding")
    return torch.cat(parts, dim=-1)


class TractoEmbedModel(nn.Module):
    """Selected encoders -> MECL -> Linear(., hidden) -> ReLU -> Linear(hidden, n_classes).

    ``frozen`` encoders never receive gradients and stay in eval mode.
    """

    def __init__(self, cfg: ModelConfig, encoders=ENCODERS, frozen=("streamline", "patch"),
                 streamline: StreamlineEncoder | None = None, cluster: ClusterEncoder | None = None,
                 patch: PatchEncoder | None = None, cluster_input: str = "cluster"):
        super().__init__()
        unknown = set(encoders) - set(ENCODERS)
        if unknown or not encoders:
            raise InvalidInputError(f"encoders must be a non-empty subset of {ENCODERS}")
        self.cfg = cfg
        self.encoders = tuple(e for e in ENCODERS if e in encoders)
        self.frozen = tuple(e for e in frozen if e in self.encoders)
        self.cluster_input = cluster_input
        if "streamline" in self.encoders:
            self.streamline = streamline or StreamlineEncoder(cfg)
        if "cluster" in self.encoders:
            self.cluster = cluster or ClusterEncoder(cfg)
        if "patch" in self.encoders:
            self.patch = patch or PatchEncoder(cfg)
        self.fused_dim = sum(cfg.widths[e] for e in self.encoders)
        self.classifier = mlp((self.fused_dim, cfg.classifier_hidden, cfg.n_classes))
        for name in self.frozen:
            for p in getattr(self, name).parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        for name in self.frozen:
            getattr(self, name).eval()
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def embeddings(self, descriptors=None, clouds=None, patches=None) -> dict:
        out = {}
        if "streamline" in self.encoders:
            out["streamline"] = self._maybe_nograd("streamline", lambda: self.streamline.embed(descriptors))
        if "cluster" in self.encoders:
            out["cluster"] = self._maybe_nograd("cluster", lambda: self.cluster.embed(clouds))
        if "patch" in self.encoders:
            out["patch"] = self._maybe_nograd("patch", lambda: self.patch.embed(patches))
        return out

    def _maybe_nograd(self, name, fn):
        if name in self.frozen:
            with torch.no_grad():
                return fn()
        return fn()

    def classify_embeddings(self, embeddings: dict) -> torch.Tensor:
        fused = mecl_concat(embeddings, self.cfg.widths, self.encoders)
        return check_finite(self.classifier(fused), "classifier logits")

    def forward(self, descriptors=None, clouds=None, patches=None):
        return self.classify_embeddings(self.embeddings(descriptors, clouds, patches))
