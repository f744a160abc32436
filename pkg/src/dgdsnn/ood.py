"""Out-of-distribution detection from evolved graph topology, with the
standard confidence/feature baselines and threshold-free metrics.

The topology signature of a sample is its dense (post-momentum,
pre-pruning) adjacency sequence flattened in timestep order and
concatenated across layers.  Per-class centroids of ID signatures are
the prototypes; a sample's anomaly score is its Euclidean distance to
the nearest prototype, and the decision threshold kappa is the 95th
percentile (nearest rank) of the ID training scores.

All five methods share one orientation: higher score = more anomalous.
The softmax-confidence baseline is negated accordingly, and the free
energy -logsumexp(logits) already points that way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import network_forward
from .numgrad import DataError, DimensionError, ParameterError


@dataclass
class PrototypeBank:
    """Per-class centroids in some feature space plus the calibrated
    decision threshold."""
    centroids: np.ndarray       # (n_classes, dim)
    kappa: float

    @property
    def n_classes(self):
        return self.centroids.shape[0]


@dataclass
class OodScoreSet:
    """Anomaly scores for an ID and an OOD population, higher = more
    anomalous, for one method."""
    method: str
    id_scores: np.ndarray
    ood_scores: np.ndarray


@dataclass
class OodMetrics:
    auroc: float
    aupr_out: float
    fpr95: float

    def as_dict(self):
        return {"auroc": self.auroc, "aupr_out": self.aupr_out,
                "fpr95": self.fpr95}


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def topology_signature(traces, use_pruned=False):
    """Flattened adjacency sequence: (B, layers * T * N * N).

    Timestep-major within each layer, layers concatenated.  With the
    static variant every timestep repeats the same matrix."""
    parts = []
    for layer in traces:
        mats = layer.adjacency_pruned if use_pruned else layer.adjacency
        if not mats:
            raise DataError("layer trace has no adjacency records")
        seq = np.stack(mats, axis=1)              # (B, T, N, N)
        parts.append(seq.reshape(seq.shape[0], -1))
    return np.concatenate(parts, axis=1)


def firing_vector(traces):
    """Penultimate-layer time-averaged firing rates: (B, N * C).

    The feature space shared by the k-NN and firing-prototype
    baselines."""
    layer = traces[-1]
    per_node = []
    for i in range(len(layer.spikes[0])):
        maps = np.stack([layer.spikes[t][i] for t in range(layer.timesteps)],
                        axis=1)                   # (B, T, C, H, W)
        per_node.append(maps.mean(axis=(1, 3, 4)))  # (B, C)
    return np.concatenate(per_node, axis=1)


def collect_outputs(net, data, batch_size=32):
    """Eval-mode logits, signatures, firing vectors, and labels for a
    stream list (the inputs every scoring method needs)."""
    logits_all, sigs, fires, labels = [], [], [], []
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        frames = np.stack([s.frames for s in chunk]).astype(np.float64)
        logits, trace = network_forward(net, frames, mode="eval")
        logits_all.append(logits.value)
        sigs.append(topology_signature(trace.layers))
        fires.append(firing_vector(trace.layers))
        labels.extend(s.label for s in chunk)
    return (np.concatenate(logits_all), np.concatenate(sigs),
            np.concatenate(fires), np.array(labels, dtype=np.intp))


# ---------------------------------------------------------------------------
# prototypes and scores
# ---------------------------------------------------------------------------

def percentile_nearest_rank(values, pct):
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise DataError("cannot take a percentile of no values")
    rank = int(np.ceil(pct / 100.0 * v.size))
    return float(v[max(rank, 1) - 1])


def compute_prototypes(features, labels, n_classes=None):
    """Class centroids and the 95th-percentile threshold of the ID
    training anomaly scores."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = int(n_classes if n_classes is not None else labels.max() + 1)
    centroids = np.empty((n_classes, features.shape[1]))
    for c in range(n_classes):
        members = features[labels == c]
        if members.shape[0] == 0:
            raise DataError(f"no training signatures for class {c}")
        centroids[c] = members.mean(axis=0)
    bank = PrototypeBank(centroids, kappa=0.0)
    train_scores = prototype_scores(features, bank)
    bank.kappa = percentile_nearest_rank(train_scores, 95)
    return bank


def prototype_scores(features, bank):
    """Distance to the nearest centroid, one score per row."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None]
    if features.shape[1] != bank.centroids.shape[1]:
        raise DimensionError(
            f"feature dim {features.shape[1]} does not match prototypes "
            f"dim {bank.centroids.shape[1]}")
    diffs = features[:, None, :] - bank.centroids[None, :, :]
    return np.sqrt((diffs * diffs).sum(axis=2)).min(axis=1)


def dgp_score(signature, bank):
    """Distance of one topology signature to the nearest prototype;
    flagged OOD when the score exceeds kappa."""
    return float(prototype_scores(signature, bank)[0])


def scp_score(firing_vec, bank):
    """Same nearest-prototype rule over firing-rate features."""
    return float(prototype_scores(firing_vec, bank)[0])


def msp_score(logits):
    """1 - max softmax probability (negated confidence)."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    conf = e.max(axis=1) / e.sum(axis=1)
    out = 1.0 - conf
    return float(out[0]) if single else out


def energy_score(logits):
    """Free energy -logsumexp(logits); ID samples sit lower."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    m = logits.max(axis=1)
    out = -(m + np.log(np.exp(logits - m[:, None]).sum(axis=1)))
    return float(out[0]) if single else out


def knn_score(feature, train_features, k):
    """Euclidean distance to the k-th nearest training feature."""
    train_features = np.asarray(train_features, dtype=np.float64)
    if not 1 <= k <= train_features.shape[0]:
        raise ParameterError(
            f"k must be in 1..{train_features.shape[0]}, got {k}")
    feature = np.asarray(feature, dtype=np.float64)
    single = feature.ndim == 1
    if single:
        feature = feature[None]
    diffs = feature[:, None, :] - train_features[None, :, :]
    dists = np.sqrt((diffs * diffs).sum(axis=2))
    out = np.sort(dists, axis=1)[:, k - 1]
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _average_ranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_rank(id_scores, ood_scores):
    """P(random OOD score > random ID score), ties counting one half;
    computed from the Mann-Whitney rank statistic."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    combined = np.concatenate([id_scores, ood_scores])
    ranks = _average_ranks(combined)
    n_id, n_ood = len(id_scores), len(ood_scores)
    u = ranks[n_id:].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_id * n_ood))


def aupr_out(id_scores, ood_scores):
    """Average precision with OOD as the positive class, descending
    score threshold sweep (ties handled as blocks)."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    scores = np.concatenate([id_scores, ood_scores])
    positive = np.concatenate([np.zeros(len(id_scores)),
                               np.ones(len(ood_scores))])
    order = np.argsort(-scores, kind="mergesort")
    scores, positive = scores[order], positive[order]
    n_pos = positive.sum()
    ap = 0.0
    tp = fp = 0.0
    prev_recall = 0.0
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[j + 1] == scores[i]:
            j += 1
        tp += positive[i:j + 1].sum()
        fp += (j - i + 1) - positive[i:j + 1].sum()
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def fpr_at_95_tpr(id_scores, ood_scores):
    """Fraction of ID scores at or above the threshold that detects 95%
    of the OOD scores (nearest rank)."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    desc = np.sort(ood_scores)[::-1]
    rank = int(np.ceil(0.95 * len(desc)))
    thresh = desc[max(rank, 1) - 1]
    return float((id_scores >= thresh).mean())


def metrics(scores):
    """AUROC, AUPR-Out, and FPR95 for one score set."""
    if len(scores.id_scores) == 0 or len(scores.ood_scores) == 0:
        raise DataError("both score populations must be nonempty")
    return OodMetrics(
        auroc=auroc_rank(scores.id_scores, scores.ood_scores),
        aupr_out=aupr_out(scores.id_scores, scores.ood_scores),
        fpr95=fpr_at_95_tpr(scores.id_scores, scores.ood_scores),
    )
