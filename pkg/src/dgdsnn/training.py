"""Surrogate-gradient BPTT training, synthetic event streams, and the
perturbation protocols used for robustness evaluation.

Real event-camera recordings are out of scope; two synthetic stream
families stand in for them.  Moving bars carry genuine temporal
structure (the class is the sweep direction), while flicker patterns
re-sample a fixed class mask every frame and carry none, which is what
the out-of-distribution experiments exploit.

Training unrolls the full T timesteps (no truncation), differentiates
through the plasticity pipeline (with the top-k gradient mask) and the
diffusion operator, and optimizes with SGD + momentum 0.9 under a
cosine or step learning-rate schedule.  The seed fixes everything:
dataset, initialization, shuffling, dropout.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .energy import firing_rate_report
from .network import MorphNet, network_forward
from .numgrad import (
    ParameterError,
    Rng,
    backward,
    gather_rows,
    logsumexp,
    meannode,
    sub,
)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    """Hyperparameters of one experiment, with desk-scale defaults.

    ``static=True`` forces the graph momentum to 1, freezing the
    adjacency at its all-ones prior (the static variant).
    """
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 0.1
    sgd_momentum: float = 0.9
    schedule: str = "cosine"          # cosine | step
    optimizer: str = "sgd"
    seed: int = 2020
    nodes: int = 4
    diffusion_steps: int = 2
    top_k: int = 3
    trace_retention: float = 0.6
    graph_beta: float = 0.2
    timesteps: int = 5
    static: bool = False
    layers: int = 3
    channels: int = 16
    in_channels: int = 2
    input_size: int = 16
    classes: int = 4
    heads: int = 4
    softmax_tau: float = 0.01
    dropout: float = 0.2
    tau_decay: float = 0.5
    v_th: float = 1.0
    train_fraction: float = 0.8
    target_accuracy: float = 0.0      # stop early once test accuracy >= this

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be >= 0")
        if self.schedule not in ("cosine", "step"):
            raise ParameterError(f"unknown schedule {self.schedule!r}")
        if self.optimizer != "sgd":
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.trace_retention <= 1.0:
            raise ParameterError("trace_retention must be in [0, 1]")
        if not 0.0 <= self.graph_beta <= 1.0:
            raise ParameterError("graph_beta must be in [0, 1]")
        if not 1 <= self.top_k <= self.nodes:
            raise ParameterError("top_k must be in 1..nodes")
        if self.nodes < 2 or self.layers < 1 or self.timesteps < 1:
            raise ParameterError("need nodes >= 2, layers >= 1, timesteps >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ParameterError("train_fraction must be in (0, 1]")
        return self

    @property
    def effective_beta(self):
        return 1.0 if self.static else self.graph_beta

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d).validate()


def build_network(config, rng=None, smooth=False):
    """Fresh network from a config, initialized from the config seed."""
    config.validate()
    rng = rng or Rng(config.seed, stream=1)
    return MorphNet(
        in_channels=config.in_channels, channels=config.channels,
        n_classes=config.classes, timesteps=config.timesteps, rng=rng,
        n_layers=config.layers, n_nodes=config.nodes,
        diffusion_steps=config.diffusion_steps, top_k=config.top_k,
        trace_retention=config.trace_retention,
        graph_beta=config.effective_beta, n_heads=config.heads,
        softmax_tau=config.softmax_tau, dropout_p=config.dropout,
        tau_decay=config.tau_decay, v_th=config.v_th, smooth=smooth)


# ---------------------------------------------------------------------------
# synthetic event streams
# ---------------------------------------------------------------------------

@dataclass
class SynthStream:
    """One synthetic sample: binary frames (T, C, H, W) and its label."""
    frames: np.ndarray
    label: int
    kind: str


@dataclass
class PerturbSpec:
    """A perturbation protocol and its integer intensity level 0..9."""
    kind: str
    rho: int

    def validate(self):
        if self.kind not in ("salt-pepper", "poisson", "frame-loss"):
            raise ParameterError(
                f"unknown perturbation kind {self.kind!r} "
                "(choose from salt-pepper, poisson, frame-loss)")
        if not 0 <= int(self.rho) <= 9:
            raise ParameterError(f"rho must be in 0..9, got {self.rho}")
        return self


BAR_WIDTH = 2
EVENT_NOISE = 0.02
FLICKER_MASK_DENSITY = 0.45
FLICKER_INTENSITY = 0.5
POISSON_BASE_RATE = 0.01


def _bar_frames(direction, h, w, t_steps, rng):
    """Full-length bar sweeping across the frame; ON events on channel 0
    where the bar newly covers pixels, OFF events on channel 1 where it
    just left them."""
    span = (w if direction in (0, 1) else h) - BAR_WIDTH
    frames = np.zeros((t_steps, 2, h, w), dtype=np.uint8)
    prev_cover = np.zeros((h, w), dtype=bool)
    for t in range(t_steps):
        pos = (t * span) // (t_steps - 1)
        cover = np.zeros((h, w), dtype=bool)
        if direction == 0:      # left -> right
            cover[:, pos:pos + BAR_WIDTH] = True
        elif direction == 1:    # right -> left
            cover[:, w - BAR_WIDTH - pos:w - pos] = True
        elif direction == 2:    # top -> bottom
            cover[pos:pos + BAR_WIDTH, :] = True
        else:                   # bottom -> top
            cover[h - BAR_WIDTH - pos:h - pos, :] = True
        frames[t, 0] = cover & ~prev_cover
        frames[t, 1] = prev_cover & ~cover
        prev_cover = cover
    noise = rng.bernoulli(EVENT_NOISE, frames.shape)
    return np.maximum(frames, noise)


def _flicker_frames(mask, t_steps, rng):
    flicker = rng.bernoulli(FLICKER_INTENSITY, (t_steps,) + mask.shape)
    return (flicker & mask).astype(np.uint8)


def generate_dataset(kind, classes, samples_per_class, dims=(16, 16),
                     timesteps=5, seed=2020):
    """Deterministic labeled stream list; identical seeds give bitwise
    identical datasets.

    moving-bar: the class is the sweep direction (up to 4); the bar
    position advances strictly with t.  flicker: a fixed class-specific
    spatial mask re-sampled with Bernoulli(0.5) each frame, no motion.
    """
    h, w = dims
    if h < 8 or w < 8:
        raise ParameterError(f"dims must be at least 8x8, got {h}x{w}")
    if timesteps < 4:
        raise ParameterError(f"need at least 4 timesteps, got {timesteps}")
    if kind == "moving-bar":
        if not 1 <= classes <= 4:
            raise ParameterError(
                f"moving-bar supports 1..4 direction classes, got {classes}")
        if timesteps > min(h, w) - BAR_WIDTH + 1:
            raise ParameterError(
                f"{timesteps} timesteps cannot advance strictly on {h}x{w}")
    elif kind == "flicker":
        if classes < 1:
            raise ParameterError("need at least one class")
    else:
        raise ParameterError(f"unknown dataset kind {kind!r} "
                             "(choose from moving-bar, flicker)")

    rng = Rng(seed, stream=0)
    masks = None
    if kind == "flicker":
        mask_rng = Rng(seed, stream=3)
        masks = [mask_rng.bernoulli(FLICKER_MASK_DENSITY, (2, h, w)).astype(bool)
                 for _ in range(classes)]
    data = []
    for label in range(classes):
        for _ in range(samples_per_class):
            if kind == "moving-bar":
                frames = _bar_frames(label, h, w, timesteps, rng)
            else:
                frames = _flicker_frames(masks[label], timesteps, rng)
            data.append(SynthStream(frames, label, kind))
    return data


def perturb(stream, spec, rng):
    """Apply one perturbation protocol; rho = 0 is the identity.

    salt-pepper replaces each pixel by a fair coin with probability
    rho*0.02; poisson injects events at per-pixel rate rho*0.01 (clamped
    to binary); frame-loss zeroes each frame with probability rho*0.05.
    """
    spec.validate()
    frames = stream.frames.copy()
    rho = int(spec.rho)
    if rho == 0:
        return SynthStream(frames, stream.label, stream.kind)
    if spec.kind == "salt-pepper":
        hit = rng.uniform(size=frames.shape) < rho * 0.02
        coin = rng.bernoulli(0.5, frames.shape)
        frames = np.where(hit, coin, frames).astype(np.uint8)
    elif spec.kind == "poisson":
        counts = rng.poisson(rho * POISSON_BASE_RATE, frames.shape)
        frames = np.minimum(frames.astype(np.int64) + counts, 1).astype(np.uint8)
    else:  # frame-loss
        drop = rng.uniform(size=frames.shape[0]) < rho * 0.05
        frames[drop] = 0
    return SynthStream(frames, stream.label, stream.kind)


def split_dataset(data, train_fraction, seed):
    """Deterministic stratified-ish split by shuffled index."""
    rng = Rng(seed, stream=4)
    idx = rng.permutation(len(data))
    n_train = int(round(train_fraction * len(data)))
    train = [data[i] for i in idx[:n_train]]
    test = [data[i] for i in idx[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class SgdMomentum:
    def __init__(self, params, momentum=0.9):
        self.params = list(params)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.value = p.value - lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def schedule_lr(config, epoch):
    base = config.learning_rate
    if config.schedule == "cosine":
        return base * 0.5 * (1.0 + np.cos(np.pi * epoch / max(config.epochs, 1)))
    lr = base
    if epoch >= config.epochs * 3 // 4:
        lr *= 0.01
    elif epoch >= config.epochs // 2:
        lr *= 0.1
    return lr


def cross_entropy(logits, labels):
    lse = logsumexp(logits, axis=-1)
    picked = gather_rows(logits, np.asarray(labels, dtype=np.intp))
    return meannode(sub(lse, picked))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float
    mean_dirichlet_energy: float
    mean_firing_rate: float


def _batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _stack_frames(data, idx):
    return np.stack([data[i].frames for i in idx]).astype(np.float64)


def _labels(data, idx):
    return np.array([data[i].label for i in idx], dtype=np.intp)


def _trace_stats(trace):
    energies = []
    firing = []
    for layer in trace.layers:
        energies.extend(float(e.mean()) for e in layer.energy)
        firing.extend(float(f.mean()) for f in layer.firing)
    return float(np.mean(energies)), float(np.mean(firing))


def train(net, data, config, test_data=None, rng=None, log=None):
    """Cross-entropy BPTT training; returns per-epoch metrics.

    Stops early once test accuracy reaches ``config.target_accuracy``
    (when positive and test data is given).  A non-finite loss aborts
    with a DivergenceError naming the epoch.
    """
    config.validate()
    if not data:
        raise ParameterError("training data is empty")
    rng = rng or Rng(config.seed, stream=2)
    opt = SgdMomentum(net.parameters(), momentum=config.sgd_momentum)
    history = []
    for epoch in range(config.epochs):
        lr = schedule_lr(config, epoch)
        order = rng.permutation(len(data))
        losses = []
        correct = 0
        energies = []
        rates = []
        for idx in _batches(len(data), config.batch_size, order):
            frames = _stack_frames(data, idx)
            labels = _labels(data, idx)
            logits, trace = network_forward(net, frames, mode="train", rng=rng)
            loss = cross_entropy(logits, labels)
            if not np.isfinite(loss.value):
                raise DivergenceError(
                    f"loss diverged at epoch {epoch} (value {loss.value})")
            opt.zero_grad()
            backward(loss)
            opt.step(lr)
            losses.append(float(loss.value))
            correct += int((logits.value.argmax(axis=1) == labels).sum())
            e_mean, f_mean = _trace_stats(trace)
            energies.append(e_mean)
            rates.append(f_mean)
        train_acc = correct / len(data)
        test_acc = float("nan")
        if test_data:
            test_acc = evaluate(net, test_data,
                                batch_size=config.batch_size).accuracy
        m = EpochMetrics(epoch, float(np.mean(losses)), train_acc, test_acc,
                         float(np.mean(energies)), float(np.mean(rates)))
        history.append(m)
        if log:
            log(m)
        if (config.target_accuracy > 0 and test_data
                and test_acc >= config.target_accuracy):
            break
    return history


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray
    firing_rates: np.ndarray
    n_samples: int


def evaluate(net, data, perturb_spec=None, rng=None, batch_size=32):
    """Eval-mode accuracy, per-class accuracy, and mean per-node firing
    rates; state is reset before every sample batch.

    An optional perturbation is applied to each stream before inference
    (rho = 0 leaves the data bitwise unchanged).
    """
    if not data:
        raise ParameterError("evaluation data is empty")
    if perturb_spec is not None:
        perturb_spec.validate()
        rng = rng or Rng(2020, stream=5)
        data = [perturb(s, perturb_spec, rng) for s in data]
    n_classes = net.n_classes
    hits = np.zeros(n_classes)
    counts = np.zeros(n_classes)
    rate_sums = None
    for idx in _batches(len(data), batch_size):
        frames = _stack_frames(data, idx)
        labels = _labels(data, idx)
        logits, trace = network_forward(net, frames, mode="eval")
        pred = logits.value.argmax(axis=1)
        for lab, p in zip(labels, pred):
            counts[lab] += 1
            hits[lab] += (lab == p)
        rates = firing_rate_report(trace) * len(idx)
        rate_sums = rates if rate_sums is None else rate_sums + rates
    per_class = np.divide(hits, counts, out=np.zeros(n_classes),
                          where=counts > 0)
    return EvalReport(float(hits.sum() / counts.sum()), per_class,
                      rate_sums / len(data), len(data))
