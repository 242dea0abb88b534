"""Three-branch network: frozen 2D features with a linear head, a trainable
point encoder with main + mimicry heads, and a fusion trunk with its own
main + mimicry heads (optionally two mimicry heads for symmetric alignment).

The point encoder is a small permutation-equivariant stand-in for a voxel
U-Net: a shared per-point MLP where every layer concatenates each point's
features with the mean over its k nearest neighbors. Neighbor indices are
precomputed from the fixed point cloud, so equivariance is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from . import containers
from .geometry import lift_features, project_points
from .synthio import PairedSample

ENCODER_INPUT_DIM = 11  # xyz + neighbor centroid offset + per-axis spread + dist mean/std


@dataclass
class ModelConfig:
    num_classes: int
    feature_dim: int = 64  # C, dimension of the frozen 2D features
    encoder_width: int = 64  # D3
    encoder_layers: int = 3
    knn: int = 8
    dropout: float = 0.1
    fusion: str = "mlp"  # "mlp" (two hidden layers) or "vanilla" (linear + ReLU)
    symal_head: bool = False  # second fusion mimicry head
    bn_decay: float = 0.9  # running-average decay of fusion batch norm

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class BranchOutputs:
    logits_2d_main: torch.Tensor
    logits_3d_main: torch.Tensor
    logits_3d_mmc: torch.Tensor
    logits_fuse_main: torch.Tensor
    logits_fuse_mmc: torch.Tensor
    valid_mask: torch.Tensor
    logits_fuse_mmc2: torch.Tensor | None = None


@dataclass
class PreparedBatch:
    """Concatenated per-point model inputs for one or more scenes."""
    encoder_input: torch.Tensor  # (N, ENCODER_INPUT_DIM)
    knn_index: torch.Tensor  # (N, k) into the concatenated point list
    features_2d: torch.Tensor  # (N, C) frozen, lifted
    valid_mask: torch.Tensor  # (N,) bool
    labels: torch.Tensor | None  # (N,) or None for unlabeled target batches
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.encoder_input.shape[0]
        if self.features_2d.shape[0] != n:
            raise ValueError("lifted 2D features and 3D inputs disagree on point count")


def local_statistics(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-point encoder input and kNN indices from a fixed point cloud.

    With fewer than k neighbors available the index rows are wrap-padded,
    which keeps batching shapes fixed and stays permutation-equivariant.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        raise ValueError("need at least 2 points for neighbor statistics")
    k_eff = min(k, n - 1)
    _, idx = cKDTree(points).query(points, k=k_eff + 1)
    idx = np.atleast_2d(idx)[:, 1:]
    if k_eff < k:
        idx = np.pad(idx, ((0, 0), (0, k - k_eff)), mode="wrap")
    neigh = points[idx]  # (n, k, 3)
    offsets = neigh - points[:, None, :]
    dists = np.linalg.norm(offsets, axis=2)
    feats = np.concatenate([
        points,
        offsets.mean(axis=1),
        offsets.std(axis=1),
        dists.mean(axis=1, keepdims=True),
        dists.std(axis=1, keepdims=True),
    ], axis=1)
    return feats, idx.astype(np.int64)


def prepare_sample(sample: PairedSample, config: ModelConfig,
                   dtype: torch.dtype = torch.float32) -> PreparedBatch:
    """Lift the sample's frozen patch features to its points and build model inputs."""
    index = project_points(sample.points, sample.extrinsics, sample.intrinsics)
    feats2d, valid = lift_features(sample.patch_features, index)
    if feats2d.shape[1] != config.feature_dim:
        raise ValueError(f"patch features have dim {feats2d.shape[1]}, model expects {config.feature_dim}")
    enc_in, knn = local_statistics(sample.points, config.knn)
    return PreparedBatch(
        encoder_input=torch.from_numpy(enc_in).to(dtype),
        knn_index=torch.from_numpy(knn),
        features_2d=torch.from_numpy(np.ascontiguousarray(feats2d)).to(dtype),
        valid_mask=torch.from_numpy(valid.copy()),
        labels=torch.from_numpy(sample.labels.copy()),
        sample_ids=[sample.sample_id],
    )


def merge_batches(parts: list[PreparedBatch], with_labels: bool) -> PreparedBatch:
    """Concatenate scenes; neighbor indices are offset so pooling never crosses scenes."""
    offset = 0
    knn = []
    for p in parts:
        knn.append(p.knn_index + offset)
        offset += p.encoder_input.shape[0]
    labels = None
    if with_labels:
        if any(p.labels is None for p in parts):
            raise ValueError("labels requested but a scene carries none")
        labels = torch.cat([p.labels for p in parts])
    return PreparedBatch(
        encoder_input=torch.cat([p.encoder_input for p in parts]),
        knn_index=torch.cat(knn),
        features_2d=torch.cat([p.features_2d for p in parts]),
        valid_mask=torch.cat([p.valid_mask for p in parts]),
        labels=labels,
        sample_ids=[sid for p in parts for sid in p.sample_ids],
    )


class SeededDropout(nn.Module):
    """Dropout drawing its mask from a module-owned generator stream."""

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p
        self.generator = torch.Generator()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        mask = (torch.rand(x.shape, generator=self.generator) < keep).to(x.dtype)
        return x * mask / keep


class PointEncoder(nn.Module):
    """Shared MLP with kNN mean-pooling between layers; output (N, width)."""

    def __init__(self, width: int, layers: int):
        super().__init__()
        dims = [ENCODER_INPUT_DIM] + [width] * layers
        self.layers = nn.ModuleList(nn.Linear(2 * dims[i], dims[i + 1]) for i in range(layers))

    def forward(self, x: torch.Tensor, knn_index: torch.Tensor) -> torch.Tensor:
        h = x
        for layer in self.layers:
            pooled = h[knn_index].mean(dim=1)
            h = torch.relu(layer(torch.cat([h, pooled], dim=1)))
        return h


class MlpFusion(nn.Module):
    """Two hidden layers at the 2D feature width, each with batch norm, GeLU, dropout."""

    def __init__(self, feature_dim: int, dropout: float, bn_decay: float):
        super().__init__()
        momentum = 1.0 - bn_decay
        self.block1 = nn.Linear(2 * feature_dim, feature_dim)
        self.norm1 = nn.BatchNorm1d(feature_dim, momentum=momentum)
        self.drop1 = SeededDropout(dropout)
        self.block2 = nn.Linear(feature_dim, feature_dim)
        self.norm2 = nn.BatchNorm1d(feature_dim, momentum=momentum)
        self.drop2 = SeededDropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.drop1(nn.functional.gelu(self.norm1(self.block1(x))))
        return self.drop2(nn.functional.gelu(self.norm2(self.block2(h))))


class VanillaFusion(nn.Module):
    """Single projection layer with a ReLU, the lightweight fusion baseline."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.block = nn.Linear(2 * feature_dim, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.block(x))


class ThreeBranchModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, k = config.feature_dim, config.num_classes
        self.head_2d = nn.Linear(c, k)
        self.encoder_3d = PointEncoder(config.encoder_width, config.encoder_layers)
        self.head_3d = nn.Linear(config.encoder_width, k)
        self.head_3d_mmc = nn.Linear(config.encoder_width, k)
        self.proj_3d = nn.Linear(config.encoder_width, c)
        if config.fusion == "mlp":
            self.fusion = MlpFusion(c, config.dropout, config.bn_decay)
        elif config.fusion == "vanilla":
            self.fusion = VanillaFusion(c)
        else:
            raise ValueError(f"unknown fusion variant {config.fusion!r}")
        self.head_fuse = nn.Linear(c, k)
        self.head_fuse_mmc = nn.Linear(c, k)
        self.head_fuse_mmc2 = nn.Linear(c, k) if config.symal_head else None

    def init_parameters(self, seed: int) -> None:
        """Fan-in-scaled uniform weights, zero biases, seeded dropout streams."""
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / np.sqrt(module.in_features)
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm1d):
                module.reset_parameters()
                module.reset_running_stats()
        for i, module in enumerate(m for m in self.modules() if isinstance(m, SeededDropout)):
            module.generator.manual_seed(seed + 7919 * (i + 1))

    def forward(self, batch: PreparedBatch, return_features: bool = False):
        feats_2d = batch.features_2d.detach()  # frozen: never a gradient sink
        if feats_2d.shape[0] != batch.encoder_input.shape[0]:
            raise ValueError("lifted 2D features and 3D inputs disagree on point count")
        f3d = self.encoder_3d(batch.encoder_input, batch.knn_index)
        fusion_input = torch.cat([feats_2d, self.proj_3d(f3d)], dim=1)
        f_fuse = self.fusion(fusion_input)
        outputs = BranchOutputs(
            logits_2d_main=self.head_2d(feats_2d),
            logits_3d_main=self.head_3d(f3d),
            logits_3d_mmc=self.head_3d_mmc(f3d),
            logits_fuse_main=self.head_fuse(f_fuse),
            logits_fuse_mmc=self.head_fuse_mmc(f_fuse),
            logits_fuse_mmc2=self.head_fuse_mmc2(f_fuse) if self.head_fuse_mmc2 is not None else None,
            valid_mask=batch.valid_mask,
        )
        if return_features:
            return outputs, {"f3d": f3d, "fusion_input": fusion_input, "f_fuse": f_fuse}
        return outputs

    def forward_sample(self, sample: PairedSample, mode: str = "eval") -> BranchOutputs:
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        self.train(mode == "train")
        batch = prepare_sample(sample, self.config, dtype=next(self.parameters()).dtype)
        if mode == "eval":
            with torch.no_grad():
                return self(batch)
        return self(batch)

    def trainable_parameters(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint optimizer groups: the 2D head, the 3D branch, the fusion branch."""
        groups = {
            "2d_head": list(self.head_2d.parameters()),
            "3d": (list(self.encoder_3d.parameters()) + list(self.head_3d.parameters())
                   + list(self.head_3d_mmc.parameters())),
            "fusion": (list(self.proj_3d.parameters()) + list(self.fusion.parameters())
                       + list(self.head_fuse.parameters()) + list(self.head_fuse_mmc.parameters())),
        }
        if self.head_fuse_mmc2 is not None:
            groups["fusion"] += list(self.head_fuse_mmc2.parameters())
        return groups


def save_checkpoint(model: ThreeBranchModel, path: str, meta: dict | None = None) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for i, module in enumerate(m for m in model.modules() if isinstance(m, SeededDropout)):
        arrays[f"rng/dropout{i}"] = module.generator.get_state().numpy()
    meta = dict(meta or {})
    meta["model_config"] = model.config.to_dict()
    containers.save_arrays(path, arrays, meta)


def load_checkpoint(path: str) -> tuple[ThreeBranchModel, dict]:
    arrays, meta = containers.load_arrays(path)
    model = ThreeBranchModel(ModelConfig.from_dict(meta["model_config"]))
    state = {k[len("param/"):]: torch.from_numpy(v)
             for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    for i, module in enumerate(m for m in model.modules() if isinstance(m, SeededDropout)):
        key = f"rng/dropout{i}"
        if key in arrays:
            module.generator.set_state(torch.from_numpy(arrays[key]))
    return model, meta
