"""U-Net inference model and joint illumination/network training."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .labels import QuantizationModel, quantize, round_to_depth
from .optics import ImageStack, LedArray
from .physlayer import IlluminationPattern, NoiseConfig, NoiseLayer, PhysicalLayer, initial_weights

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class UNetConfig:
    initial_filters: int = 16
    expansion_ratio: float = 2.0
    convs_per_block: int = 2
    down_blocks: int = 5
    up_blocks: int = 5

    def __post_init__(self):
        if self.down_blocks != self.up_blocks:
            raise ConfigError("down_blocks and up_blocks must match")
        if self.initial_filters < 1 or self.convs_per_block < 1 or self.down_blocks < 1:
            raise ConfigError("filters, convs per block and block count must be positive")
        if self.expansion_ratio <= 0:
            raise ConfigError("expansion_ratio must be positive")

    @property
    def stage_widths(self) -> list[int]:
        return [int(round(self.initial_filters * self.expansion_ratio**i)) for i in range(self.down_blocks)]

    @property
    def bottleneck_width(self) -> int:
        return int(round(self.initial_filters * self.expansion_ratio**self.down_blocks))


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.005
    lr_reduce_factor: float = math.sqrt(10)
    lr_patience: int = 5
    batch_size: int = 4
    l1_coefficient: float = 0.0004
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    max_epochs: int = 150
    early_stop_patience: int = 15
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.noise, dict):
            object.__setattr__(self, "noise", NoiseConfig(**self.noise))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.initial_lr <= 0 or self.lr_reduce_factor <= 1:
            raise ConfigError("initial_lr must be positive and lr_reduce_factor > 1")
        if min(self.lr_patience, self.batch_size, self.max_epochs, self.early_stop_patience) < 1:
            raise ConfigError("patiences, batch size and epoch count must be positive")
        if self.l1_coefficient < 0:
            raise ConfigError("l1_coefficient must be nonnegative")


def _conv_bn_relu(cin: int, cout: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


def _conv_block(cin: int, cout: int, n: int) -> nn.Sequential:
    layers = _conv_bn_relu(cin, cout)
    for _ in range(n - 1):
        layers += _conv_bn_relu(cout, cout)
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """Encoder/decoder with concatenated skips and a sigmoid head.

    Down-sampling is 2x2 max pooling; up-sampling is nearest-neighbour x2
    followed by a 3x3 convolution.  Every convolution except the 1x1 head is
    followed by batch normalization.
    """

    def __init__(self, cfg: UNetConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        self.encoders = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.encoders.append(_conv_block(cin, w, cfg.convs_per_block))
            cin = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _conv_block(cin, cfg.bottleneck_width, cfg.convs_per_block)
        cin = cfg.bottleneck_width
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w in reversed(widths):
            self.ups.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), *_conv_bn_relu(cin, w)))
            self.decoders.append(_conv_block(2 * w, w, cfg.convs_per_block))
            cin = w
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        side = 2**self.cfg.down_blocks
        if x.shape[-1] % side or x.shape[-2] % side:
            raise ConfigError(f"input {tuple(x.shape[-2:])} not divisible by {side}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([skip, up(x)], dim=1))
        return torch.sigmoid(self.head(x))


def build_unet(cfg: UNetConfig, input_channels: int = 1, input_size: int | None = None) -> UNet:
    if input_size is not None and input_size % 2**cfg.down_blocks:
        raise ConfigError(f"input size {input_size} not divisible by 2**{cfg.down_blocks}")
    return UNet(cfg, input_channels)


class IlluminatedUNet(nn.Module):
    """Physical layer -> noise layer -> U-Net."""

    def __init__(self, weights: np.ndarray, unet_cfg: UNetConfig, noise: NoiseConfig, learn_pattern: bool):
        super().__init__()
        self.physical = PhysicalLayer(weights, trainable=learn_pattern)
        self.noise = NoiseLayer(noise)
        self.unet = build_unet(unet_cfg, 1)

    def synthesize(self, stacks: torch.Tensor) -> torch.Tensor:
        return self.physical(stacks)

    def forward(self, stacks: torch.Tensor) -> torch.Tensor:
        return self.unet(self.noise(self.physical(stacks)))


def loss(prediction, label, pattern, l1_coefficient: float):
    """Pixel MSE plus ``l1_coefficient * Σ|w|``.

    Works on NumPy arrays and torch tensors alike; ``pattern`` may be an
    :class:`IlluminationPattern` or a raw weight vector/tensor.
    """
    w = pattern.weights if isinstance(pattern, IlluminationPattern) else pattern
    if tuple(prediction.shape) != tuple(label.shape):
        raise ValueError(f"shape mismatch: {tuple(prediction.shape)} vs {tuple(label.shape)}")
    return ((prediction - label) ** 2).mean() + l1_coefficient * abs(w).sum()


@dataclass
class TrainedModel:
    network: IlluminatedUNet
    pattern: IlluminationPattern
    history: list[dict]
    unet_cfg: UNetConfig
    train_cfg: TrainConfig
    provenance: dict = field(default_factory=dict)

    def predict(self, stacks: np.ndarray) -> np.ndarray:
        """Continuous noise-free predictions for ``(B, N, H, W)`` stacks."""
        self.network.eval()
        dtype = next(self.network.parameters()).dtype
        with torch.no_grad():
            out = self.network(torch.as_tensor(np.asarray(stacks), dtype=dtype))
        return out[:, 0].double().numpy()

    def synthesize(self, stacks: np.ndarray) -> np.ndarray:
        self.network.eval()
        dtype = next(self.network.parameters()).dtype
        with torch.no_grad():
            out = self.network.synthesize(torch.as_tensor(np.asarray(stacks), dtype=dtype))
        return out[:, 0].double().numpy()


def _labels(targets: np.ndarray, quantizer: QuantizationModel | None) -> np.ndarray:
    if quantizer is None:
        return targets.astype(np.float32)
    return quantize(targets, quantizer).astype(np.float32)


def train(dataset, unet_cfg: UNetConfig, train_cfg: TrainConfig,
          pattern: IlluminationPattern | None = None,
          quantizer: QuantizationModel | None = None,
          progress: bool = False) -> TrainedModel:
    """Jointly fit U-Net and (when ``pattern`` is None) the LED weights.

    A fixed ``pattern`` is excluded from optimization and returned untouched.
    The returned network is the best-validation-loss snapshot.
    """
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    learned = pattern is None
    array = dataset.array
    weights = initial_weights(array.n, rng) if learned else pattern.weights

    x_train, y_train = dataset.arrays("train")
    x_val, y_val = dataset.arrays("val")
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and validation splits must be nonempty")
    if x_train.shape[-1] % 2**unet_cfg.down_blocks:
        raise ConfigError(f"patch size {x_train.shape[-1]} not divisible by 2**{unet_cfg.down_blocks}")
    x_train, x_val = torch.from_numpy(x_train), torch.from_numpy(x_val)
    y_train = torch.from_numpy(_labels(y_train, quantizer)).unsqueeze(1)
    y_val = torch.from_numpy(_labels(y_val, quantizer)).unsqueeze(1)

    model = IlluminatedUNet(weights, unet_cfg, train_cfg.noise, learned)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=train_cfg.initial_lr, betas=train_cfg.betas, eps=train_cfg.eps)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=1 / train_cfg.lr_reduce_factor, patience=train_cfg.lr_patience, threshold=0.0)
    shuffler = torch.Generator().manual_seed(train_cfg.seed)

    history: list[dict] = []
    best = (math.inf, None, -1)
    stale = 0
    for epoch in range(train_cfg.max_epochs):
        model.train()
        order = torch.randperm(len(x_train), generator=shuffler)
        total, count = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            opt.zero_grad()
            pred = model(x_train[idx])
            value = loss(pred, y_train[idx], model.physical.weights, train_cfg.l1_coefficient)
            if not torch.isfinite(value):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}",
                    {"epoch": epoch, "state": copy.deepcopy(model.state_dict()), "history": history})
            value.backward()
            opt.step()
            total += value.item() * len(idx)
            count += len(idx)

        model.eval()
        with torch.no_grad():
            val_mse = float(((model(x_val) - y_val) ** 2).mean())
        lr = opt.param_groups[0]["lr"]
        history.append({"epoch": epoch, "train_loss": total / max(count, 1), "val_loss": val_mse, "lr": lr})
        if progress:
            log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, total / max(count, 1), val_mse, lr)
        if val_mse < best[0]:
            best = (val_mse, copy.deepcopy(model.state_dict()), epoch)
            stale = 0
        else:
            stale += 1
        sched.step(val_mse)
        if stale >= train_cfg.early_stop_patience:
            break

    model.load_state_dict(best[1])
    model.eval()
    if learned:
        final = IlluminationPattern(model.physical.weights.detach().double().numpy(), array,
                                    {"name": "learned", "seed": train_cfg.seed})
    else:
        final = pattern
    provenance = {
        "dataset": getattr(dataset, "manifest_hash", None),
        "best_epoch": best[2],
        "unet": asdict(unet_cfg),
        "train": _train_cfg_dict(train_cfg),
    }
    return TrainedModel(model, final, history, unet_cfg, train_cfg, provenance)


def infer(model: TrainedModel, stack, bits: int) -> np.ndarray:
    """Noise-free prediction for one stack, rounded to ``bits`` precision."""
    images = stack.images if isinstance(stack, ImageStack) else np.asarray(stack)
    if images.ndim != 3 or images.shape[0] != model.pattern.array.n:
        raise ValueError(f"stack shape {images.shape} incompatible with {model.pattern.array.n} LEDs")
    return round_to_depth(model.predict(images[None])[0], bits)


# -- checkpoints ---------------------------------------------------------------

def _train_cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


def save_checkpoint(model: TrainedModel, path, extra: dict | None = None) -> Path:
    """Zip archive of little-endian tensors plus JSON configs, pattern and history."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.network.state_dict()
    index = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy()
            arr = arr.astype("<i8") if arr.dtype.kind in "iu" else arr.astype("<f4")
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            info = zipfile.ZipInfo(f"tensors/{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
            index[name] = {"shape": list(arr.shape), "dtype": arr.dtype.str}
        docs = {
            "tensors.json": index,
            "pattern.json": {
                "weights": [float(w) for w in model.pattern.weights],
                "led_array": model.pattern.array.to_dict(),
                "metadata": model.pattern.metadata,
            },
            "config.json": {"unet": asdict(model.unet_cfg), "train": _train_cfg_dict(model.train_cfg)},
            "history.json": model.history,
            "provenance.json": {**model.provenance, **(extra or {})},
        }
        for name, doc in docs.items():
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> TrainedModel:
    with zipfile.ZipFile(path) as zf:
        docs = {n: json.loads(zf.read(n)) for n in
                ("tensors.json", "pattern.json", "config.json", "history.json", "provenance.json")}
        state = {name: torch.from_numpy(np.load(io.BytesIO(zf.read(f"tensors/{name}.npy"))).copy())
                 for name in docs["tensors.json"]}
    cfg = docs["config.json"]
    unet_cfg = UNetConfig(**cfg["unet"])
    train_cfg = TrainConfig(**cfg["train"])
    array = LedArray.from_dict(docs["pattern.json"]["led_array"])
    pattern = IlluminationPattern(np.asarray(docs["pattern.json"]["weights"]), array,
                                  docs["pattern.json"]["metadata"])
    network = IlluminatedUNet(pattern.weights, unet_cfg, train_cfg.noise, learn_pattern=False)
    network.load_state_dict(state)
    network.eval()
    return TrainedModel(network, pattern, docs["history.json"], unet_cfg, train_cfg, docs["provenance.json"])
