"""The four skin-temperature regressors.

Two fusion networks combine a per-subject sensitivity index (SSI) with the
ROI image: early fusion broadcasts the SSI as a fourth input channel;
late fusion extracts image and SSI features separately and concatenates
them before the dense head. The ablation ("dl") is the late-fusion network
with the SSI branch removed, and "nipst" is the linear per-subject
calibration baseline.

The convolutional backbone is a compact stack (3x3 conv + ReLU + average
pooling down to a spatial_out x spatial_out grid with feature_dim output
channels). The published full-scale feature extractor is replaced by this
stack behind the same shape contract; the "paper" scale profile keeps every
published tensor shape (150x150 input, 4x4x1920 features, 2560/1024/512
head) for shape verification, while the "desk" profile (32x32, F=192)
trains in minutes.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .errors import ConfigError
from .ssi import fit_ssi, predict_linear

MODEL_VARIANTS = ("nisdl1", "nisdl2", "dl", "nipst")

# channel progression of the four 1x1 fusion convs in the early-fusion model
EARLY_FUSION_CHANNELS = (16, 16, 8, 3)


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int = 32
    feature_dim: int = 192
    spatial_out: int = 4
    stage_channels: tuple[int, int] = (4, 8)
    scale_profile: str = "desk"
    # fixed affine normalization applied to the raw SSI before it enters a network
    ssi_center: float = 8.0
    ssi_scale: float = 4.0
    # fixed offset subtracted from input pixels (zero-centers [0, 1] images)
    image_center: float = 0.5

    def validate(self) -> None:
        if self.feature_dim % 6 != 0:
            raise ConfigError(
                f"feature_dim must be divisible by 6 (SSI branch pools by 3 then 2 "
                f"while keeping the 3:1 feature ratio), got {self.feature_dim}"
            )
        if self.input_side < 4 * self.spatial_out:
            raise ConfigError(
                f"input_side {self.input_side} too small for two 2x pooling stages "
                f"down to spatial_out {self.spatial_out}"
            )

    @property
    def ssi_feature_dim(self) -> int:
        return self.feature_dim // 3

    @property
    def head_widths(self) -> tuple[int, int, int, int]:
        """Dense head of the late-fusion model: concat width down to 1."""
        concat = self.feature_dim + self.ssi_feature_dim
        h1 = int(round(0.4 * concat))
        return (concat, h1, h1 // 2, 1)

    @classmethod
    def for_profile(cls, profile: str) -> "BackboneConfig":
        if profile == "paper":
            return cls(input_side=150, feature_dim=1920, scale_profile="paper")
        if profile == "desk":
            return cls()
        raise ConfigError(f"unknown scale profile {profile!r} (expected 'paper' or 'desk')")


class _Backbone:
    """Shared conv stack: 3 channels in, (n, spatial_out, spatial_out, F) out."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, name: str):
        c1, c2 = cfg.stage_channels
        self.stack = nn.Sequential(
            [
                nn.Conv2d(3, c1, 3, rng, f"{name}.conv1"),
                nn.ReLU(),
                nn.AvgPool2d(2),
                nn.Conv2d(c1, c2, 3, rng, f"{name}.conv2"),
                nn.ReLU(),
                nn.AvgPool2d(2),
                nn.Conv2d(c2, cfg.feature_dim, 3, rng, f"{name}.conv3"),
                nn.ReLU(),
                nn.AdaptiveAvgPool2d(cfg.spatial_out),
            ]
        )

    def forward(self, x):
        return self.stack.forward(x)

    def backward(self, g):
        return self.stack.backward(g)

    def params(self):
        return self.stack.params()


class FusionModel:
    """Base class: forward(images, ssi) -> (n,) temperatures, with explicit
    reverse-mode backward. After forward, `activation_shapes` lists named
    intermediate shapes and `grad_images` / `grad_ssi` hold input gradients
    after backward."""

    variant = "base"

    def __init__(self, cfg: BackboneConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.output_offset = 0.0
        self.activation_shapes: list[tuple[str, tuple[int, ...]]] = []
        self.grad_images = None
        self.grad_ssi = None

    # -- parameter plumbing shared by the variants --

    def params(self) -> list[nn.Param]:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in tensors:
                raise KeyError(f"checkpoint missing tensor {p.name}")
            if tuple(tensors[p.name].shape) != p.value.shape:
                raise nn.ShapeMismatchError(
                    f"tensor {p.name}: expected {p.value.shape}, got {tensors[p.name].shape}"
                )
            p.value[...] = tensors[p.name]

    def config_dict(self) -> dict:
        doc = asdict(self.cfg)
        doc["stage_channels"] = list(self.cfg.stage_channels)
        doc["variant"] = self.variant
        return doc

    def _check_inputs(self, images: np.ndarray, ssi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        images = np.asarray(images, dtype=np.float64)
        ssi = np.asarray(ssi, dtype=np.float64)
        side = self.cfg.input_side
        if images.ndim != 4 or images.shape[1:] != (side, side, 3):
            raise nn.ShapeMismatchError(
                f"expected images (n, {side}, {side}, 3), got {images.shape}"
            )
        if ssi.shape != (images.shape[0],):
            raise nn.ShapeMismatchError(
                f"expected ssi ({images.shape[0]},), got {ssi.shape}"
            )
        return images, ssi

    def _norm_ssi(self, ssi: np.ndarray) -> np.ndarray:
        return (ssi - self.cfg.ssi_center) / self.cfg.ssi_scale

    def _center_images(self, images: np.ndarray) -> np.ndarray:
        return images - self.cfg.image_center

    def forward(self, images: np.ndarray, ssi: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_pred: np.ndarray) -> None:
        raise NotImplementedError

    def predict(self, images: np.ndarray, ssi: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Forward in batches (keeps the im2col buffers small)."""
        out = []
        for start in range(0, images.shape[0], batch_size):
            out.append(self.forward(images[start : start + batch_size], ssi[start : start + batch_size]))
        return np.concatenate(out) if out else np.zeros(0)


class EarlyFusionModel(FusionModel):
    """SSI broadcast to an input plane, concatenated with the RGB channels,
    reduced by four 1x1 convs, then backbone -> pool -> dense."""

    variant = "nisdl1"

    def __init__(self, cfg: BackboneConfig, seed: int):
        super().__init__(cfg, seed)
        rng = np.random.default_rng(np.random.PCG64(seed))
        convs = []
        in_ch = 4
        for i, out_ch in enumerate(EARLY_FUSION_CHANNELS):
            convs.append(nn.Conv2d(in_ch, out_ch, 1, rng, f"fuse.conv{i + 1}"))
            convs.append(nn.ReLU())
            in_ch = out_ch
        self.fuse = nn.Sequential(convs)
        self.backbone = _Backbone(cfg, rng, "backbone")
        self.pool = nn.GlobalAvgPool2d()
        self.head = nn.Dense(cfg.feature_dim, 1, rng, "head")

    def forward(self, images, ssi):
        images, ssi = self._check_inputs(images, ssi)
        n = images.shape[0]
        side = self.cfg.input_side
        z = self._norm_ssi(ssi)
        plane = np.broadcast_to(z[:, None, None, None], (n, side, side, 1))
        fused = np.concatenate([self._center_images(images), plane], axis=3)
        x = self.fuse.forward(fused)
        feat = self.backbone.forward(x)
        pooled = self.pool.forward(feat)
        out = self.head.forward(pooled)
        self.activation_shapes = [
            ("fused_input", fused.shape),
            ("backbone_out", feat.shape),
            ("pooled", pooled.shape),
            ("output", (n,)),
        ]
        return out[:, 0] + self.output_offset

    def backward(self, grad_pred):
        g = self.head.backward(np.asarray(grad_pred)[:, None])
        g = self.pool.backward(g)
        g = self.backbone.backward(g)
        g = self.fuse.backward(g)
        self.grad_images = g[:, :, :, :3]
        self.grad_ssi = g[:, :, :, 3].sum(axis=(1, 2)) / self.cfg.ssi_scale

    def params(self):
        return self.fuse.params() + self.backbone.params() + self.head.params()


class LateFusionModel(FusionModel):
    """Separate image and SSI feature branches concatenated before a
    three-layer dense head (paper scale: 2560 -> 1024 -> 512 -> 1)."""

    variant = "nisdl2"

    def __init__(self, cfg: BackboneConfig, seed: int):
        super().__init__(cfg, seed)
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.backbone = _Backbone(cfg, rng, "backbone")
        self.pool = nn.GlobalAvgPool2d()
        # SSI branch: scalar replicated to an F-length sequence, two
        # conv/pool stages down to F/3 flattened features
        self.ssi_branch = nn.Sequential(
            [
                nn.Conv1d(1, 2, 3, rng, "ssi.conv1"),
                nn.ReLU(),
                nn.AvgPool1d(3),
                nn.Conv1d(2, 2, 3, rng, "ssi.conv2"),
                nn.ReLU(),
                nn.AvgPool1d(2),
                nn.Flatten(),
            ]
        )
        w0, w1, w2, w3 = cfg.head_widths
        self.head = nn.Sequential(
            [
                nn.Dense(w0, w1, rng, "head.fc1"),
                nn.ReLU(),
                nn.Dense(w1, w2, rng, "head.fc2"),
                nn.ReLU(),
                nn.Dense(w2, w3, rng, "head.fc3"),
            ]
        )
        self._split = cfg.feature_dim

    def forward(self, images, ssi):
        images, ssi = self._check_inputs(images, ssi)
        n = images.shape[0]
        feat = self.backbone.forward(self._center_images(images))
        img_features = self.pool.forward(feat)
        z = self._norm_ssi(ssi)
        expanded = np.broadcast_to(
            z[:, None, None], (n, self.cfg.feature_dim, 1)
        ).copy()
        ssi_features = self.ssi_branch.forward(expanded)
        combined = np.concatenate([img_features, ssi_features], axis=1)
        out = self.head.forward(combined)
        self.activation_shapes = [
            ("backbone_out", feat.shape),
            ("image_features", img_features.shape),
            ("ssi_features", ssi_features.shape),
            ("combined", combined.shape),
            ("output", (n,)),
        ]
        return out[:, 0] + self.output_offset

    def backward(self, grad_pred):
        g = self.head.backward(np.asarray(grad_pred)[:, None])
        g_img = g[:, : self._split]
        g_ssi = g[:, self._split :]
        g_exp = self.ssi_branch.backward(g_ssi)
        self.grad_ssi = g_exp.sum(axis=(1, 2)) / self.cfg.ssi_scale
        g_feat = self.pool.backward(g_img)
        self.grad_images = self.backbone.backward(g_feat)

    def params(self):
        return self.backbone.params() + self.ssi_branch.params() + self.head.params()


class ImageOnlyModel(FusionModel):
    """Late-fusion network with the SSI branch removed; the dense head takes
    the image feature width directly. Output never depends on the supplied SSI."""

    variant = "dl"

    def __init__(self, cfg: BackboneConfig, seed: int):
        super().__init__(cfg, seed)
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.backbone = _Backbone(cfg, rng, "backbone")
        self.pool = nn.GlobalAvgPool2d()
        _, h1, h2, h3 = cfg.head_widths
        self.head = nn.Sequential(
            [
                nn.Dense(cfg.feature_dim, h1, rng, "head.fc1"),
                nn.ReLU(),
                nn.Dense(h1, h2, rng, "head.fc2"),
                nn.ReLU(),
                nn.Dense(h2, h3, rng, "head.fc3"),
            ]
        )

    def forward(self, images, ssi):
        images, ssi = self._check_inputs(images, ssi)
        n = images.shape[0]
        feat = self.backbone.forward(self._center_images(images))
        img_features = self.pool.forward(feat)
        out = self.head.forward(img_features)
        self.activation_shapes = [
            ("backbone_out", feat.shape),
            ("image_features", img_features.shape),
            ("output", (n,)),
        ]
        return out[:, 0] + self.output_offset

    def backward(self, grad_pred):
        g = self.head.backward(np.asarray(grad_pred)[:, None])
        g = self.pool.backward(g)
        self.grad_images = self.backbone.backward(g)
        self.grad_ssi = np.zeros(self.grad_images.shape[0])

    def params(self):
        return self.backbone.params() + self.head.params()


def build_nisdl1(cfg: BackboneConfig, seed: int = 0) -> EarlyFusionModel:
    return EarlyFusionModel(cfg, seed)


def build_nisdl2(cfg: BackboneConfig, seed: int = 0) -> LateFusionModel:
    return LateFusionModel(cfg, seed)


def build_dl(cfg: BackboneConfig, seed: int = 0) -> ImageOnlyModel:
    return ImageOnlyModel(cfg, seed)


def build_model(variant: str, cfg: BackboneConfig, seed: int = 0) -> FusionModel:
    builders = {"nisdl1": build_nisdl1, "nisdl2": build_nisdl2, "dl": build_dl}
    if variant not in builders:
        raise ConfigError(f"unknown model variant {variant!r} (expected one of {sorted(builders)})")
    return builders[variant](cfg, seed)


def nipst_predict(
    calibration: list[tuple[float, float]], query_s: list[float] | np.ndarray
) -> np.ndarray:
    """Linear baseline: fit the saturation-temperature line on the
    calibration pairs, evaluate it at each query saturation."""
    record = fit_ssi(calibration, subject_id="nipst")
    return np.asarray([predict_linear(record, float(s)) for s in np.atleast_1d(query_s)])
