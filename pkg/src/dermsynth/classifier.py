"""Downstream classifier harness: train from scratch, predict, score."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, SingleClassError, TrainingAbort, ValidationError
from .types import DiagnosisClass, EvaluationReport

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    architecture: str = "resnet18"
    input_size: int = 224
    mean: float = 0.5
    std: float = 0.5
    horizontal_flip: bool = True
    momentum: float = 0.9
    learning_rate: float = 0.01
    lr_step_epochs: int = 10
    lr_decay: float = 0.1
    batch_size: int = 32
    patience: int = 5
    max_epochs: int = 100
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("input_size", "batch_size", "patience", "max_epochs", "lr_step_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.std <= 0:
            raise ConfigError("learning_rate and std must be positive")
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")

    def lr_at(self, epoch: int) -> float:
        """Step decay with 0-indexed epochs."""
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_step_epochs)

    def to_dict(self):
        return asdict(self)


class SmallCNN(nn.Module):
    def __init__(self, num_classes):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(), nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(64, num_classes)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1))


def _resnet18(num_classes):
    from torchvision.models import resnet18

    return resnet18(weights=None, num_classes=num_classes)


ARCHITECTURES = {"resnet18": _resnet18, "small_cnn": SmallCNN}


def build_network(name, num_classes):
    try:
        return ARCHITECTURES[name](num_classes)
    except KeyError:
        raise ConfigError(f"unknown classifier architecture {name!r}") from None


def load_uint8(source, size):
    """Path, HxWx3 uint8 array or (3,H,W) tensor -> (3, size, size) uint8 tensor."""
    from PIL import Image

    if isinstance(source, (str, Path)):
        with Image.open(source) as im:
            arr = np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR))
    else:
        arr = np.asarray(source)
        if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
            arr = arr.transpose(1, 2, 0)
        if arr.dtype != np.uint8:
            arr = np.clip((arr + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
        if arr.shape[:2] != (size, size):
            arr = np.asarray(Image.fromarray(arr).resize((size, size), Image.BILINEAR))
    return torch.from_numpy(np.require(arr, requirements=["C", "W"])).permute(2, 0, 1).contiguous()


def _normalize(batch_uint8, config):
    x = batch_uint8.float() / 255.0
    return (x - config.mean) / config.std


@dataclass
class TrainedClassifier:
    network: nn.Module
    classes: tuple
    config: ClassifierConfig
    history: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        state = {k: v.detach().cpu().numpy() for k, v in self.network.state_dict().items()}
        np.savez(path, **state)
        manifest = {"classes": [c.value for c in self.classes], "config": self.config.to_dict(), "info": self.info}
        Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, path):
        manifest = json.loads(Path(str(path) + ".json").read_text())
        config = ClassifierConfig(**manifest["config"])
        classes = tuple(DiagnosisClass.parse(c) for c in manifest["classes"])
        net = build_network(config.architecture, len(classes))
        with np.load(path) as data:
            net.load_state_dict({k: torch.from_numpy(data[k]) for k in data.files})
        net.eval()
        return cls(net, classes, config, info=manifest.get("info", {}))


def _stack(items, size):
    if not items:
        return torch.zeros(0, 3, size, size, dtype=torch.uint8)
    return torch.stack([load_uint8(src, size) for src in items])


def _split_validation(n, fraction, gen):
    n_val = max(1, int(round(n * fraction)))
    perm = torch.randperm(n, generator=gen).tolist()
    return perm[n_val:], perm[:n_val]


def _epoch_loss(net, x, y, config, batch):
    net.eval()
    total, correct = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(y), batch):
            logits = net(_normalize(x[i : i + batch], config))
            total += F.cross_entropy(logits, y[i : i + batch], reduction="sum").item()
            correct += int((logits.argmax(1) == y[i : i + batch]).sum())
    return total / len(y), correct / len(y)


def train_classifier(train_set, val_set=None, config: ClassifierConfig | None = None, classes=None):
    """Train a classifier from scratch on ``train_set``, a list of (image source, class) pairs.

    Without ``val_set`` a ``config.val_fraction`` share of the training data is
    held out. Training stops after ``patience`` epochs without a lower
    validation loss and the best-validation weights are restored.
    """
    config = config or ClassifierConfig()
    if classes is None:
        classes = sorted({DiagnosisClass.parse(c) for _, c in train_set}, key=lambda c: c.value)
    classes = tuple(DiagnosisClass.parse(c) for c in classes)
    present = {DiagnosisClass.parse(c) for _, c in train_set}
    if len(present) < 2:
        raise SingleClassError(f"need at least 2 classes in the training set, got {len(present)}")
    index = {c: i for i, c in enumerate(classes)}
    unknown = present - set(index)
    if unknown:
        raise ValidationError(f"training labels outside the class set: {sorted(c.value for c in unknown)}")

    gen = torch.Generator().manual_seed(config.seed)
    x_all = _stack([s for s, _ in train_set], config.input_size)
    y_all = torch.tensor([index[DiagnosisClass.parse(c)] for _, c in train_set], dtype=torch.long)
    if val_set is None:
        tr, va = _split_validation(len(y_all), config.val_fraction, gen)
        x_tr, y_tr, x_va, y_va = x_all[tr], y_all[tr], x_all[va], y_all[va]
        val_note = f"{config.val_fraction:.0%} held out from training data"
    else:
        x_tr, y_tr = x_all, y_all
        x_va = _stack([s for s, _ in val_set], config.input_size)
        y_va = torch.tensor([index[DiagnosisClass.parse(c)] for _, c in val_set], dtype=torch.long)
        val_note = "caller-supplied validation set"

    torch.manual_seed(config.seed)
    net = build_network(config.architecture, len(classes))
    opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate, momentum=config.momentum)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_step_epochs, gamma=config.lr_decay)

    history = []
    best_loss, best_state, best_epoch, stale = float("inf"), None, -1, 0
    n = len(y_tr)
    for epoch in range(config.max_epochs):
        net.train()
        lr = opt.param_groups[0]["lr"]
        perm = torch.randperm(n, generator=gen)
        run_loss, seen = 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            if len(idx) < 2 and n > 1:
                # BatchNorm cannot train on a single sample with 1x1 feature maps.
                continue
            xb = x_tr[idx]
            if config.horizontal_flip:
                flip = torch.rand(len(idx), generator=gen) < 0.5
                xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
            logits = net(_normalize(xb, config))
            loss = F.cross_entropy(logits, y_tr[idx])
            if not torch.isfinite(loss):
                raise TrainingAbort(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            run_loss += loss.item() * len(idx)
            seen += len(idx)
        sched.step()
        train_loss, train_acc = _epoch_loss(net, x_tr, y_tr, config, config.batch_size)
        val_loss, val_acc = _epoch_loss(net, x_va, y_va, config, config.batch_size)
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": run_loss / max(seen, 1),
                "train_eval_loss": train_loss,
                "train_accuracy": train_acc,
                "val_loss": val_loss,
                "val_accuracy": val_acc,
            }
        )
        log.debug("epoch %d lr %.4g train %.4f val %.4f", epoch, lr, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch, stale = val_loss, epoch, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    info = {
        "epochs_run": len(history),
        "best_epoch": best_epoch,
        "early_stopping_monitor": "val_loss",
        "validation": val_note,
        "n_train": int(n),
        "n_val": int(len(y_va)),
    }
    return TrainedClassifier(net, classes, config, history, info)


def predict(model: TrainedClassifier, images) -> list:
    images = list(images)
    if not images:
        return []
    x = _stack(images, model.config.input_size)
    out = []
    model.network.eval()
    with torch.no_grad():
        for i in range(0, len(x), 64):
            logits = model.network(_normalize(x[i : i + 64], model.config))
            out.extend(model.classes[j] for j in logits.argmax(1).tolist())
    return out


def confusion_matrix(predictions, labels, class_set) -> np.ndarray:
    """Rows are true classes, columns predicted classes, both in ``class_set`` order."""
    index = {DiagnosisClass.parse(c): i for i, c in enumerate(class_set)}
    m = np.zeros((len(index), len(index)), dtype=np.int64)
    try:
        rows = [index[DiagnosisClass.parse(y)] for y in labels]
        cols = [index[DiagnosisClass.parse(p)] for p in predictions]
    except KeyError as e:
        raise ValidationError(f"class {e.args[0]} not in the class set") from None
    np.add.at(m, (rows, cols), 1)
    return m


def evaluate(predictions, labels, class_set, metadata=None) -> EvaluationReport:
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ValidationError(f"{len(predictions)} predictions for {len(labels)} labels")
    m = confusion_matrix(predictions, labels, class_set)
    return EvaluationReport.from_confusion(list(class_set), m, metadata)
