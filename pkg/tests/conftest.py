import numpy as np
import pytest
import torch

from mgfuse.model import BranchOutputs, ModelConfig, ThreeBranchModel
from mgfuse.synthio import ClassGeometry, DomainSpec, SceneSpec, build_dataset

torch.set_num_threads(1)


def random_outputs(rng: np.random.Generator, n: int = 8, k: int = 4,
                   symal: bool = False, valid_frac: float = 0.8,
                   requires_grad: bool = False) -> BranchOutputs:
    def logits():
        t = torch.tensor(rng.normal(0, 2.0, size=(n, k)), dtype=torch.float64)
        t.requires_grad_(requires_grad)
        return t

    valid = torch.tensor(rng.random(n) < valid_frac)
    if not valid.any():
        valid[0] = True
    return BranchOutputs(
        logits_2d_main=logits(),
        logits_3d_main=logits(),
        logits_3d_mmc=logits(),
        logits_fuse_main=logits(),
        logits_fuse_mmc=logits(),
        logits_fuse_mmc2=logits() if symal else None,
        valid_mask=valid,
    )


def tiny_world(num_classes: int = 3, num_points: int = 96, num_source: int = 9,
               num_target: int = 12, seed: int = 5, target: DomainSpec | None = None,
               extent_jitter: float = 0.4):
    """A very small dataset for trainer-level tests (seconds, not minutes)."""
    spec = SceneSpec(num_points=num_points, num_classes=num_classes, layout_seed=3,
                     feature_dim=16,
                     class_geometry=ClassGeometry.for_classes(num_classes, extent_jitter))
    source = DomainSpec(name="clean", label_available=True)
    if target is None:
        target = DomainSpec(name="shifted", feature_noise_2d=1.0)
    return build_dataset(spec, source, target, num_source=num_source,
                         num_target=num_target, seed=seed,
                         val_fraction=0.25, test_fraction=0.25)


def tiny_model(num_classes: int = 3, feature_dim: int = 16, **kw) -> ThreeBranchModel:
    cfg = ModelConfig(num_classes=num_classes, feature_dim=feature_dim,
                      encoder_width=kw.pop("encoder_width", 16),
                      encoder_layers=kw.pop("encoder_layers", 2),
                      knn=kw.pop("knn", 4), **kw)
    model = ThreeBranchModel(cfg)
    model.init_parameters(0)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
