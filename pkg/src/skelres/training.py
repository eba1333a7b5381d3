"""SGD training, evaluation and stage timing."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .autodiff import BatchNorm2d, Parameter, make_rng, one_hot, softmax, softmax_cross_entropy
from .encoding import (
    INPUT_SIZE,
    TRAIN_SIZE,
    augment_set,
    encode_for_network,
    encode_image,
    resize,
    to_network_input,
)
from .errors import ConfigError, EmptySplit, ShapeError
from .network import NetworkSpec, ResNet, build
from .skeleton_io import DatasetIndex, Protocol, SkeletonSequence, Topology, read_sequence

log = logging.getLogger(__name__)

# (first epoch, learning rate) pairs; epoch 75 alone runs at 0.001
DEFAULT_LR_SCHEDULE = ((1, 0.01), (75, 0.001), (76, 0.0001))


@dataclass
class TrainConfig:
    depth: int = 20
    batch_size: int = 128
    epochs: int = 120
    lr_schedule: tuple[tuple[int, float], ...] = DEFAULT_LR_SCHEDULE
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    augment: bool | None = None  # None: on for MSR protocols, off otherwise
    protocol: Protocol | None = None
    dropout: float = 0.5
    eval_batch_size: int = 256
    # re-estimate BN running stats without dropout before every evaluation
    bn_recalibration: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm needs two samples)")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not self.lr_schedule or self.lr_schedule[0][0] != 1:
            raise ConfigError("the learning-rate schedule must start at epoch 1")
        starts = [e for e, _ in self.lr_schedule]
        if starts != sorted(set(starts)):
            raise ConfigError("learning-rate schedule epochs must be strictly increasing")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("learning rates must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight decay must be non-negative")

    @classmethod
    def for_depth(cls, depth: int, **kwargs) -> "TrainConfig":
        """Defaults with the batch size used for ``depth`` (64 for ResNet-110)."""
        kwargs.setdefault("batch_size", 64 if depth == 110 else 128)
        return cls(depth=depth, **kwargs)

    @property
    def use_augmentation(self) -> bool:
        if self.augment is not None:
            return self.augment
        return self.protocol is not None and self.protocol.is_msr


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 1 <= epoch <= cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside 1..{cfg.epochs}")
    lr = cfg.lr_schedule[0][1]
    for start, value in cfg.lr_schedule:
        if epoch >= start:
            lr = value
    return lr


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, Parameter],
    state: SgdState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> None:
    """In-place momentum SGD: v = momentum*v + grad + wd*param; param -= lr*v.

    Weight decay only touches parameters flagged ``decay`` (conv/FC weights).
    """
    for name, p in params.items():
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"{name}: gradient {p.grad.shape} vs parameter {p.data.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ShapeError(f"{name}: velocity {v.shape} vs parameter {p.data.shape}")
        dt = p.data.dtype.type
        v *= dt(momentum)
        v += p.grad
        if p.decay and weight_decay:
            v += dt(weight_decay) * p.data
        p.data -= dt(lr) * v


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_err: float
    test_err: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_test_accuracy: float = 0.0
    final_train_accuracy: float = float("nan")
    stage_seconds: dict[str, float] = field(default_factory=dict)
    num_train_images: int = 0
    num_test_images: int = 0

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.epochs]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_err", "test_err"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_err), repr(r.test_err)])
        return out.getvalue()

    def summary(self) -> dict:
        return {
            "epochs": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_test_accuracy": self.best_test_accuracy,
            "final_train_accuracy": self.final_train_accuracy,
            "final_train_loss": self.epochs[-1].train_loss if self.epochs else None,
            "num_train_images": self.num_train_images,
            "num_test_images": self.num_test_images,
            "stage_seconds": self.stage_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def predict_logits(net: ResNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for uint8 N x H x W x 3 images."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(net.forward(to_network_input(images[i:i + batch_size]), train=False))
    return np.concatenate(out) if out else np.zeros((0, net.spec.num_classes))


def predict_proba(net: ResNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return softmax(predict_logits(net, images, batch_size).astype(np.float64))


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptySplit("cannot compute accuracy of an empty split")
    # np.argmax returns the first maximum, so ties go to the lowest class id
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(net: ResNet, images: np.ndarray, labels, batch_size: int = 256) -> float:
    if len(images) == 0:
        raise EmptySplit("cannot evaluate on an empty split")
    return accuracy_from_logits(predict_logits(net, images, batch_size), labels)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def recalibrate_bn(net: ResNet, images: np.ndarray, batch_size: int = 256) -> None:
    """Replace every BN running mean/variance by its average over ``images``
    passed through the network with dropout disabled.

    Running statistics gathered during training include the variance that
    dropout injects in front of each unit's second convolution; at inference
    dropout is off, so those statistics overstate the variance.  Averaging
    batch statistics from dropout-free passes removes that mismatch.
    """
    bns = [m for _, m in net.named_modules() if isinstance(m, BatchNorm2d)]
    drops = [u.drop for u in net.units]
    saved_momentum = [bn.momentum for bn in bns]
    saved_rates = [d.rate for d in drops]
    try:
        for d in drops:
            d.rate = 0.0
        for i, start in enumerate(range(0, len(images), batch_size), 1):
            chunk = images[start:start + batch_size]
            if len(chunk) < 2:
                break
            for bn in bns:
                bn.momentum = 1.0 - 1.0 / i  # cumulative mean over batches
            net.forward(to_network_input(chunk), train=True)
    finally:
        for bn, mom in zip(bns, saved_momentum):
            bn.momentum = mom
        for d, rate in zip(drops, saved_rates):
            d.rate = rate
        for _, m in net.named_modules():
            m._cache = None
        for u in net.units:
            u.relu1._cache = u.relu_out._cache = u.drop._cache = None
        net.stem_relu._cache = net.pool._cache = None
        net._ready_for_backward = False


def _seed_streams(seed: int):
    init, shuffle, dropout = np.random.SeedSequence(seed).spawn(3)
    return make_rng(init), make_rng(shuffle), make_rng(dropout)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches covering ``range(n)`` once; a trailing batch of one
    sample is folded into the previous batch so batch norm always sees two."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def train_epoch(
    net: ResNet,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    lr: float,
    opt: SgdState,
    shuffle_rng,
    dropout_rng,
) -> tuple[float, float]:
    """One pass over the training images; returns (mean loss, train-mode error)."""
    params = net.parameters()
    loss_sum = 0.0
    wrong = 0
    for idx in epoch_batches(len(images), cfg.batch_size, shuffle_rng):
        x = to_network_input(images[idx])
        y = labels[idx]
        logits = net.forward(x, train=True, rng=dropout_rng)
        loss, dlogits = softmax_cross_entropy(logits, one_hot(y, net.spec.num_classes, logits.dtype))
        net.zero_grad()
        net.backward(dlogits)
        sgd_step(params, opt, lr, cfg.momentum, cfg.weight_decay)
        loss_sum += loss * len(idx)
        wrong += int(np.sum(np.argmax(logits, axis=1) != y))
    return loss_sum / len(images), wrong / len(images)


def fit(
    train_images: np.ndarray,
    train_labels,
    test_images: np.ndarray,
    test_labels,
    num_classes: int,
    cfg: TrainConfig,
    train_eval_images: np.ndarray | None = None,
    train_eval_labels=None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    spec: NetworkSpec | None = None,
) -> tuple[ResNet, TrainReport]:
    """Train from uint8 32x32 images; returns the best-test-epoch network.

    ``train_eval_images`` (default: ``train_images``) are the un-augmented
    training images used for the final eval-mode train accuracy.
    """
    train_labels = np.asarray(train_labels, dtype=np.intp)
    test_labels = np.asarray(test_labels, dtype=np.intp)
    if len(train_images) == 0:
        raise EmptySplit("training split is empty")
    if len(test_images) == 0:
        raise EmptySplit("test split is empty")
    if len(train_images) < 2:
        raise EmptySplit("need at least two training images for batch norm")
    for name, lab in (("train", train_labels), ("test", test_labels)):
        if lab.min() < 0 or lab.max() >= num_classes:
            raise ConfigError(f"{name} label outside 0..{num_classes - 1}")

    init_rng, shuffle_rng, dropout_rng = _seed_streams(cfg.seed)
    spec = spec or NetworkSpec(cfg.depth, num_classes, dropout=cfg.dropout)
    net = build(spec, init_rng, allow_custom=not spec.is_standard_architecture)
    opt = SgdState()
    report = TrainReport(num_train_images=len(train_images), num_test_images=len(test_images))
    best_state = None
    t_train = t_eval = 0.0

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch, cfg)
        t0 = time.perf_counter()
        loss, train_err = train_epoch(
            net, train_images, train_labels, cfg, lr, opt, shuffle_rng, dropout_rng
        )
        t1 = time.perf_counter()
        if cfg.bn_recalibration:
            recalibrate_bn(net, train_images, cfg.eval_batch_size)
        test_acc = evaluate(net, test_images, test_labels, cfg.eval_batch_size)
        t2 = time.perf_counter()
        t_train += t1 - t0
        t_eval += t2 - t1
        rec = EpochRecord(epoch, lr, loss, train_err, 1.0 - test_acc, t2 - t0)
        report.epochs.append(rec)
        log.info("epoch %d lr %g loss %.4f train_err %.4f test_err %.4f",
                 epoch, lr, loss, train_err, rec.test_err)
        if on_epoch:
            on_epoch(rec)
        # ties go to the later, longer-trained epoch
        if best_state is None or test_acc >= report.best_test_accuracy:
            report.best_epoch = epoch
            report.best_test_accuracy = test_acc
            best_state = {k: v.copy() for k, v in net.state().items()}

    for name, dst in net.state().items():
        dst[...] = best_state[name]
    if train_eval_images is None:
        train_eval_images, train_eval_labels = train_images, train_labels
    report.final_train_accuracy = evaluate(net, train_eval_images, train_eval_labels, cfg.eval_batch_size)
    report.stage_seconds.update(train=t_train, evaluate=t_eval)
    net.metadata.update(
        epoch=report.best_epoch,
        seed=cfg.seed,
        best_test_accuracy=report.best_test_accuracy,
    )
    return net, report


def prepare_images(
    sequences: Sequence[SkeletonSequence], augment: bool, layout=None
) -> tuple[np.ndarray, np.ndarray]:
    """Encode sequences to uint8 32x32 images (x24 each when ``augment``)."""
    images, labels = [], []
    for seq in sequences:
        if augment:
            views = augment_set(resize(encode_image(seq, layout), TRAIN_SIZE, TRAIN_SIZE))
        else:
            views = [encode_for_network(seq, layout)]
        images.extend(views)
        labels.extend([seq.label] * len(views))
    if not images:
        return np.zeros((0, INPUT_SIZE, INPUT_SIZE, 3), np.uint8), np.zeros(0, np.intp)
    return np.stack(images), np.asarray(labels, dtype=np.intp)


def _load_split(index: DatasetIndex, which: list[int], topology: Topology) -> list[SkeletonSequence]:
    seqs = []
    for i in which:
        e = index.entries[i]
        seq = read_sequence(e.path, topology)
        seq.label = e.label  # protocol-local id
        seqs.append(seq)
    return seqs


def train(
    dataset: DatasetIndex,
    cfg: TrainConfig,
    topology: Topology | None = None,
    layout=None,
    on_epoch=None,
) -> tuple[ResNet, TrainReport]:
    """Load, encode and train on a protocol split."""
    if not dataset.train:
        raise EmptySplit("training split is empty")
    if not dataset.test:
        raise EmptySplit("test split is empty")
    if topology is None:
        topology = Topology.KINECT_V1 if dataset.protocol.is_msr else Topology.KINECT_V2
    if cfg.protocol is None:
        cfg = replace(cfg, protocol=dataset.protocol)
    num_classes = dataset.num_classes
    for e in dataset.entries:
        if e.label >= num_classes:
            raise ConfigError(f"{e.path}: label {e.label} >= class count {num_classes}")

    t0 = time.perf_counter()
    train_seqs = _load_split(dataset, dataset.train, topology)
    test_seqs = _load_split(dataset, dataset.test, topology)
    train_x, train_y = prepare_images(train_seqs, cfg.use_augmentation, layout)
    plain_x, plain_y = (
        prepare_images(train_seqs, False, layout) if cfg.use_augmentation else (train_x, train_y)
    )
    test_x, test_y = prepare_images(test_seqs, False, layout)
    t_encode = time.perf_counter() - t0

    net, report = fit(train_x, train_y, test_x, test_y, num_classes, cfg,
                      plain_x, plain_y, on_epoch=on_epoch)
    report.stage_seconds["encode"] = t_encode
    net.metadata.update(
        topology=topology.value,
        class_names=list(dataset.class_names),
        protocol=dataset.protocol.value,
    )
    return net, report


# --------------------------------------------------------------------------
# Stage timing
# --------------------------------------------------------------------------


@dataclass
class StageTiming:
    name: str
    description: str
    mean_ms: float
    std_ms: float
    samples: int


def _stats(ms: list[float]) -> tuple[float, float]:
    arr = np.asarray(ms)
    return float(arr.mean()), float(arr.std(ddof=1) if len(arr) > 1 else 0.0)


def timeit_stages(
    sequences: Sequence[SkeletonSequence],
    cfg: TrainConfig,
    num_classes: int | None = None,
    repeats: int = 3,
    net: ResNet | None = None,
    layout=None,
) -> list[StageTiming]:
    """Mean per-sequence wall time (ms) of encoding (A), one training pass (B)
    and end-to-end prediction, encode plus forward (C)."""
    if not sequences:
        raise EmptySplit("no sequences to time")
    if num_classes is None:
        num_classes = max(s.label for s in sequences) + 1
    num_classes = max(num_classes, 2)
    if net is None:
        init_rng, _, _ = _seed_streams(cfg.seed)
        net = build(NetworkSpec(cfg.depth, num_classes, dropout=cfg.dropout), init_rng)
    _, shuffle_rng, dropout_rng = _seed_streams(cfg.seed)

    a_ms, b_ms, c_ms = [], [], []
    images = None
    for _ in range(repeats):
        batch = []
        for seq in sequences:
            t0 = time.perf_counter()
            img = encode_for_network(seq, layout)
            a_ms.append((time.perf_counter() - t0) * 1e3)
            batch.append(img)
        images = np.stack(batch)
        for seq in sequences:
            t0 = time.perf_counter()
            img = encode_for_network(seq, layout)
            net.forward(to_network_input(img), train=False)
            c_ms.append((time.perf_counter() - t0) * 1e3)

    labels = np.asarray([min(s.label, num_classes - 1) for s in sequences], dtype=np.intp)
    if len(images) >= 2:
        opt = SgdState()
        for _ in range(repeats):
            t0 = time.perf_counter()
            train_epoch(net, images, labels, cfg, lr_at(1, cfg), opt, shuffle_rng, dropout_rng)
            b_ms.append((time.perf_counter() - t0) * 1e3 / len(images))
    else:
        b_ms.append(float("nan"))

    return [
        StageTiming("A", "encoding", *_stats(a_ms), len(a_ms)),
        StageTiming("B", "training pass", *_stats(b_ms), len(b_ms)),
        StageTiming("C", "prediction (encode + forward)", *_stats(c_ms), len(c_ms)),
    ]


def format_stage_table(stages: list[StageTiming]) -> str:
    lines = [f"{'stage':<6}{'description':<32}{'mean ms/seq':>12}{'std ms':>10}{'n':>6}"]
    for s in stages:
        lines.append(f"{s.name:<6}{s.description:<32}{s.mean_ms:>12.3f}{s.std_ms:>10.3f}{s.samples:>6}")
    return "\n".join(lines)


def stages_to_json(stages: list[StageTiming]) -> str:
    return json.dumps({"unit": "ms_per_sequence", "stages": [asdict(s) for s in stages]}, indent=2)
