"""EfficientNet-B0 trunk with an attention head, wrapped as a sklearn classifier.

Head layout (input = trunk feature map ``x`` with ``C`` channels)::

    x -> [conv3x3 -> BN -> SiLU] * n_conv_blocks -> spatial self-attention -> (+ x)
      -> global average pool -> FC -> ReLU -> FC -> ReLU -> FC -> 2 logits
"""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from ..bundles import TrainedModelBundle
from ..exceptions import EmptyManifest, GeometryMismatch, ShapeMismatch
from ..tiling import DatasetManifest, TileStack

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
EFFICIENTNET_B0_CHANNELS = 1280


@dataclass(frozen=True)
class CustomHeadConfig:
    n_conv_blocks: int = 2
    conv_channels: tuple = (1280, 1280)
    kernel_size: int = 3
    attention_kind: str = "spatial_self_attention"
    attention_reduction: int = 8
    n_fc_layers: int = 3
    fc_widths: tuple = (512, 128, 2)
    use_skip: bool = True
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        if self.n_classes != 2:
            raise ValueError("the window classifier is binary (n_classes = 2)")
        if self.n_fc_layers != 3 or len(self.fc_widths) != 3:
            raise ValueError("the head has exactly three fully-connected layers")
        if self.fc_widths[-1] != self.n_classes:
            raise ValueError("last fully-connected width must equal n_classes")
        if len(self.conv_channels) != self.n_conv_blocks:
            raise ValueError("conv_channels needs one entry per conv block")
        if self.attention_kind != "spatial_self_attention":
            raise ValueError(f"unknown attention kind {self.attention_kind!r}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd to preserve spatial size")

    @classmethod
    def reduced(cls, channels: int = 16, fc_widths=(16, 8, 2)) -> "CustomHeadConfig":
        """Small head for tests and toy runs on a light trunk."""
        return cls(conv_channels=(channels, channels), attention_reduction=4, fc_widths=fc_widths)


class SpatialSelfAttention(nn.Module):
    """Single-head dot-product attention over the ``H*W`` positions of a feature map."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        inner = max(1, channels // reduction)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.scale = 1.0 / math.sqrt(inner)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)          # (b, n, inner)
        k = self.key(x).flatten(2)                            # (b, inner, n)
        v = self.value(x).flatten(2)                          # (b, c, n)
        attn = torch.softmax(torch.bmm(q, k) * self.scale, dim=-1)  # (b, n, n)
        return torch.bmm(v, attn.transpose(1, 2)).view(b, c, h, w)


class CustomHead(nn.Module):
    def __init__(self, in_channels: int, cfg: CustomHeadConfig):
        super().__init__()
        if cfg.use_skip and cfg.conv_channels[-1] != in_channels:
            raise ShapeMismatch(
                f"skip connection needs conv output channels {cfg.conv_channels[-1]} "
                f"== head input channels {in_channels}")
        blocks, prev = [], in_channels
        for ch in cfg.conv_channels:
            blocks += [nn.Conv2d(prev, ch, cfg.kernel_size, padding=cfg.kernel_size // 2, bias=False),
                       nn.BatchNorm2d(ch), nn.SiLU()]
            prev = ch
        self.convs = nn.Sequential(*blocks)
        self.attention = SpatialSelfAttention(prev, cfg.attention_reduction)
        self.use_skip = cfg.use_skip
        w1, w2, w3 = cfg.fc_widths
        self.classifier = nn.Sequential(
            nn.Linear(prev, w1), nn.ReLU(),
            nn.Linear(w1, w2), nn.ReLU(),
            nn.Linear(w2, w3),
        )

    def branch(self, x: torch.Tensor) -> torch.Tensor:
        return self.attention(self.convs(x))

    def forward(self, x: torch.Tensor, use_branch: bool = True) -> torch.Tensor:
        y = self.branch(x) if use_branch else torch.zeros_like(x)
        if self.use_skip:
            y = y + x
        return self.classifier(F.adaptive_avg_pool2d(y, 1).flatten(1))


class TinyTrunk(nn.Sequential):
    """Three strided conv blocks; a cheap stand-in trunk for CPU smoke runs."""

    def __init__(self, out_channels: int = 16):
        super().__init__(
            nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.BatchNorm2d(8), nn.SiLU(),
            nn.Conv2d(8, out_channels, 3, stride=2, padding=1), nn.BatchNorm2d(out_channels), nn.SiLU(),
            nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1), nn.BatchNorm2d(out_channels), nn.SiLU(),
        )
        self.out_channels = out_channels


def _pretrained_b0_path() -> Optional[Path]:
    from torchvision.models import EfficientNet_B0_Weights

    url = EfficientNet_B0_Weights.IMAGENET1K_V1.url
    path = Path(torch.hub.get_dir()) / "checkpoints" / url.rsplit("/", 1)[-1]
    return path if path.is_file() else None


def build_trunk(trunk: Union[str, nn.Module] = "efficientnet_b0", pretrained: Union[bool, str, Path] = False,
                tiny_channels: int = 16) -> tuple[nn.Module, int, bool]:
    """Return ``(trunk_module, out_channels, loaded_pretrained)``.

    ``pretrained`` may be a path to a torchvision EfficientNet-B0 state dict.
    ``True`` uses the torch hub cache if the weights are already there; no
    download is attempted. Missing weights fall back to random init.
    """
    if isinstance(trunk, nn.Module):
        channels = getattr(trunk, "out_channels", None)
        if channels is None:
            with torch.no_grad():
                was_training = trunk.training
                trunk.eval()
                channels = trunk(torch.zeros(1, 3, 64, 64)).shape[1]
                trunk.train(was_training)
        return trunk, int(channels), False
    if trunk == "tiny":
        return TinyTrunk(tiny_channels), tiny_channels, False
    if trunk != "efficientnet_b0":
        raise ValueError(f"unknown trunk {trunk!r}")

    from torchvision.models import efficientnet_b0

    net = efficientnet_b0(weights=None)
    loaded = False
    if pretrained:
        path = Path(pretrained) if not isinstance(pretrained, bool) else _pretrained_b0_path()
        if path is not None and path.is_file():
            net.load_state_dict(torch.load(path, map_location="cpu"))
            loaded = True
        else:
            warnings.warn("pretrained EfficientNet-B0 weights not found; using random init", stacklevel=2)
    return net.features, EFFICIENTNET_B0_CHANNELS, loaded


class CustomEfficientNet(nn.Module):
    """Trunk + attention head. Takes float RGB in ``[0, 1]``, NCHW."""

    def __init__(self, trunk: nn.Module, trunk_channels: int, head_cfg: CustomHeadConfig,
                 pretrained_trunk: bool = False):
        super().__init__()
        self.trunk = trunk
        self.head = CustomHead(trunk_channels, head_cfg)
        self.pretrained_trunk = pretrained_trunk
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk((x - self.mean) / self.std)

    def forward(self, x: torch.Tensor, use_branch: bool = True) -> torch.Tensor:
        return self.head(self.features(x), use_branch=use_branch)


def build_custom_efficientnet(cfg: CustomHeadConfig = CustomHeadConfig(),
                              trunk: Union[str, nn.Module] = "efficientnet_b0",
                              pretrained: Union[bool, str, Path] = False) -> CustomEfficientNet:
    tiny_channels = cfg.conv_channels[-1] if cfg.conv_channels else 16
    module, channels, loaded = build_trunk(trunk, pretrained, tiny_channels=tiny_channels)
    return CustomEfficientNet(module, channels, cfg, pretrained_trunk=loaded)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    optimizer: str = "sgd"
    learning_rate: float = 1e-4
    momentum: float = 0.9
    lr_schedule: str = "one_cycle"
    max_lr_factor: float = 10.0
    pct_start: float = 0.3
    batch_size: int = 64
    seed: int = 0
    augmentation: tuple = ("horizontal_flip", "vertical_flip")

    def __post_init__(self):
        object.__setattr__(self, "augmentation", tuple(self.augmentation))
        if self.epochs <= 0 or self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, learning_rate and batch_size must be positive")
        if self.optimizer != "sgd":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("one_cycle", "constant"):
            raise ValueError(f"unsupported lr_schedule {self.lr_schedule!r}")
        unknown = set(self.augmentation) - {"horizontal_flip", "vertical_flip"}
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")

    def estimator_params(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "lr_schedule": self.lr_schedule,
            "max_lr_factor": self.max_lr_factor,
            "pct_start": self.pct_start,
            "batch_size": self.batch_size,
            "random_state": self.seed,
            "augmentation": self.augmentation,
        }


def one_cycle_lr(epoch: int, epochs: int, base_lr: float, max_lr_factor: float = 10.0,
                 pct_start: float = 0.3, final_div_factor: float = 1e4) -> float:
    """Learning rate for ``epoch`` (0-based) under a cosine one-cycle schedule.

    Rises from ``base_lr`` to ``base_lr * max_lr_factor`` over the first
    ``pct_start`` of epochs, then anneals to ``base_lr / final_div_factor``.
    """
    peak = base_lr * max_lr_factor
    final = base_lr / final_div_factor
    if epochs <= 1:
        return base_lr
    warm = max(1, int(round(pct_start * (epochs - 1))))
    if epoch <= warm:
        t = epoch / warm
        return peak + (base_lr - peak) * (1 + math.cos(math.pi * t)) / 2
    t = (epoch - warm) / max(1, epochs - 1 - warm)
    return final + (peak - final) * (1 + math.cos(math.pi * t)) / 2


def _as_tensor_batch(X, idx) -> torch.Tensor:
    block = np.stack([np.asarray(X[i]) for i in idx]) if not isinstance(X, np.ndarray) else X[idx]
    return torch.from_numpy(np.ascontiguousarray(block)).permute(0, 3, 1, 2).float().div_(255.0)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive batches; a trailing single sample joins the previous batch
    because BatchNorm cannot train on a batch of one."""
    batches = [order[s:s + batch_size] for s in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _tile_shape(X) -> tuple:
    shape = getattr(X, "shape", None)
    if shape is not None and len(shape) == 4:
        return tuple(shape[1:])
    return tuple(np.asarray(X[0]).shape)


class WindowCNNClassifier(ClassifierMixin, BaseEstimator):
    """sklearn-style wrapper around :class:`CustomEfficientNet`.

    ``X`` is any indexable stack of ``(side, side, 3)`` uint8 tiles (a numpy
    array or a :class:`~maize_abnormality.tiling.TileStack`); labels are
    0 = normal, 1 = abnormal. Prediction is the argmax of the two logits.
    """

    def __init__(self, head_config=None, trunk="efficientnet_b0", pretrained=False,
                 epochs=200, learning_rate=1e-4, momentum=0.9, lr_schedule="one_cycle",
                 max_lr_factor=10.0, pct_start=0.3, batch_size=64,
                 augmentation=("horizontal_flip", "vertical_flip"), random_state=0,
                 device="cpu", verbose=False):
        self.head_config = head_config
        self.trunk = trunk
        self.pretrained = pretrained
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.lr_schedule = lr_schedule
        self.max_lr_factor = max_lr_factor
        self.pct_start = pct_start
        self.batch_size = batch_size
        self.augmentation = augmentation
        self.random_state = random_state
        self.device = device
        self.verbose = verbose

    def _head_cfg(self) -> CustomHeadConfig:
        if self.head_config is None:
            return CustomHeadConfig()
        if isinstance(self.head_config, dict):
            return CustomHeadConfig(**self.head_config)
        return self.head_config

    def _lr(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        return one_cycle_lr(epoch, self.epochs, self.learning_rate, self.max_lr_factor, self.pct_start)

    def _augment(self, xb: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        n = xb.shape[0]
        if "horizontal_flip" in self.augmentation:
            m = torch.rand(n, generator=gen) < 0.5
            xb[m] = xb[m].flip(-1)
        if "vertical_flip" in self.augmentation:
            m = torch.rand(n, generator=gen) < 0.5
            xb[m] = xb[m].flip(-2)
        return xb

    def fit(self, X, y, X_val=None, y_val=None):
        """Train; keeps the weights of the epoch with the best validation accuracy.

        Without validation data the final epoch's weights are kept.
        """
        y = np.asarray(y, dtype=np.int64)
        if len(y) == 0:
            raise EmptyManifest("no training tiles")
        if len(y) != len(X):
            raise ValueError(f"{len(X)} tiles but {len(y)} labels")
        if X_val is not None and len(X_val) == 0:
            raise EmptyManifest("validation set is empty")
        self.classes_ = np.array([0, 1])
        self.tile_shape_ = _tile_shape(X)

        torch.manual_seed(self.random_state)
        gen = torch.Generator().manual_seed(self.random_state)
        model = build_custom_efficientnet(self._head_cfg(), self.trunk, self.pretrained).to(self.device)
        opt = torch.optim.SGD(model.parameters(), lr=self.learning_rate, momentum=self.momentum)

        self.history_ = []
        best_acc, best_state = -1.0, None
        for epoch in range(self.epochs):
            lr = self._lr(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            order = torch.randperm(len(y), generator=gen).numpy()
            correct = 0
            for idx in _batches(order, self.batch_size):
                xb = self._augment(_as_tensor_batch(X, idx), gen).to(self.device)
                yb = torch.from_numpy(y[idx]).to(self.device)
                logits = model(xb)
                loss = F.cross_entropy(logits, yb)
                opt.zero_grad()
                loss.backward()
                opt.step()
                correct += int((logits.argmax(1) == yb).sum())
            record = {"epoch": epoch + 1, "train_acc": correct / len(y), "val_acc": None, "lr": lr}
            self.model_ = model
            if X_val is not None:
                record["val_acc"] = float(self.score(X_val, y_val))
                if record["val_acc"] > best_acc:
                    best_acc, best_state = record["val_acc"], copy.deepcopy(model.state_dict())
            self.history_.append(record)
            if self.verbose:
                logger.info("epoch %d train_acc %.4f val_acc %s lr %.2e", record["epoch"],
                            record["train_acc"], record["val_acc"], lr)
        if best_state is not None:
            model.load_state_dict(best_state)
            self.best_epoch_ = max(self.history_, key=lambda r: r["val_acc"])["epoch"]
        else:
            self.best_epoch_ = self.epochs
        self.model_ = model.eval()
        return self

    @torch.no_grad()
    def logits(self, X, batch_size: Optional[int] = None) -> np.ndarray:
        check_is_fitted(self, "model_")
        if len(X) and _tile_shape(X) != tuple(self.tile_shape_):
            raise GeometryMismatch(f"trained on tiles {self.tile_shape_}, got {_tile_shape(X)}")
        self.model_.eval()
        batch_size = batch_size or self.batch_size
        out = [self.model_(_as_tensor_batch(X, np.arange(s, min(s + batch_size, len(X)))).to(self.device)).cpu()
               for s in range(0, len(X), batch_size)]
        return torch.cat(out).numpy() if out else np.zeros((0, 2), dtype=np.float32)

    def predict_proba(self, X) -> np.ndarray:
        return torch.softmax(torch.from_numpy(self.logits(X)), dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.logits(X).argmax(axis=1)

    # persistence -----------------------------------------------------------

    def save(self, directory) -> list[Path]:
        check_is_fitted(self, "model_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        params = self.get_params()
        if not isinstance(params["trunk"], str):
            raise ValueError("only named trunks can be saved")
        params["head_config"] = asdict(self._head_cfg())
        params["pretrained"] = bool(params["pretrained"])
        state = {
            "params": params,
            "tile_shape": list(self.tile_shape_),
            "best_epoch": self.best_epoch_,
            "history": self.history_,
            "pretrained_trunk": bool(self.model_.pretrained_trunk),
        }
        (directory / "cnn.json").write_text(json.dumps(state, indent=2, sort_keys=True, default=list) + "\n")
        torch.save(self.model_.state_dict(), directory / "model.pt")
        return [directory / "cnn.json", directory / "model.pt"]

    @classmethod
    def load(cls, directory) -> "WindowCNNClassifier":
        directory = Path(directory)
        state = json.loads((directory / "cnn.json").read_text())
        params = dict(state["params"])
        params["head_config"] = CustomHeadConfig(**params["head_config"])
        params["augmentation"] = tuple(params["augmentation"])
        params["pretrained"] = False
        est = cls(**params)
        model = build_custom_efficientnet(params["head_config"], params["trunk"], False)
        model.load_state_dict(torch.load(directory / "model.pt", map_location="cpu"))
        model.pretrained_trunk = state["pretrained_trunk"]
        est.model_ = model.to(est.device).eval()
        est.classes_ = np.array([0, 1])
        est.tile_shape_ = tuple(state["tile_shape"])
        est.best_epoch_ = state["best_epoch"]
        est.history_ = state["history"]
        return est


def train_cnn(model: WindowCNNClassifier, train: DatasetManifest, val: DatasetManifest,
              cfg: TrainConfig = TrainConfig(), tiles_root=None, X=None, X_val=None) -> TrainedModelBundle:
    """Train ``model`` with ``cfg`` on manifest tiles; returns the bundle.

    Pixels are read lazily from tile files under ``tiles_root`` unless
    ``X`` / ``X_val`` are supplied.
    """
    if len(train) == 0:
        raise EmptyManifest(f"{train.name} has no tiles")
    if len(val) == 0:
        raise EmptyManifest(f"{val.name} has no tiles")
    overlap = {t.tile_id for t in train.tiles} & {t.tile_id for t in val.tiles}
    if overlap:
        raise ValueError(f"train and validation manifests share tiles, e.g. {sorted(overlap)[:3]}")
    if X is None:
        X = TileStack(train, tiles_root)
    if X_val is None:
        X_val = TileStack(val, tiles_root)
    model.set_params(**cfg.estimator_params())
    model.fit(X, train.labels(), X_val, val.labels())
    return TrainedModelBundle(
        kind="cnn", estimator=model,
        config={"train": asdict(cfg), "head": asdict(model._head_cfg()), "trunk": str(model.trunk)},
        metrics=list(model.history_),
        meta={"best_epoch": model.best_epoch_, "pretrained_trunk": bool(model.model_.pretrained_trunk),
              "note": "results depend on backend nondeterminism even with a fixed seed"},
    )
