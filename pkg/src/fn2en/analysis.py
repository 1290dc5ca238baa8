"""Neuron-entropy layer analysis, top-K mean images and confusion-matrix evaluation."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import augment_batch
from .errors import ConfigError, ContractError, DataError
from .tensor import no_grad

DEFAULT_TOP_K = 100


@dataclass
class NeuronEntropyRecord:
    layer: str
    index: int
    entropy: float
    top_ids: np.ndarray
    histogram: np.ndarray

    @property
    def dominant_label(self):
        return int(np.argmax(self.histogram))


def _entropy_from_counts(counts, total):
    """Entropy of integer bin counts out of ``total``, over the last axis.

    Counts only take values 0..total, so ``p log p`` comes from a table built
    with libm; accumulating bin by bin keeps scalar and batched results
    bit-identical regardless of numpy's vectorised log.
    """
    counts = np.asarray(counts, dtype=np.int64)
    table = np.array([0.0] + [(c / total) * math.log(c / total) for c in range(1, int(total) + 1)])
    h = np.zeros(counts.shape[:-1])
    for j in range(counts.shape[-1]):
        h -= table[counts[..., j]]
    return np.maximum(h, 0.0)


def label_entropy(histogram):
    """Entropy in nats of a (possibly unnormalised) histogram; empty bins contribute 0."""
    h = np.asarray(histogram, dtype=np.float64)
    p = h[h > 0] / h.sum()
    return float(max(-sum(float(x) * math.log(float(x)) for x in p), 0.0))


def _clamp_k(k, count):
    if count == 0:
        raise DataError("cannot rank neurons over an empty dataset")
    if k > count:
        warnings.warn(f"top-K of {k} exceeds the {count} available images; using K={count}", stacklevel=3)
        return count
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    return k


def rank_images(responses, ids=None):
    """Image positions by descending response; ties go to the smaller image id."""
    responses = np.asarray(responses)
    ids = np.arange(len(responses)) if ids is None else np.asarray(ids)
    return np.lexsort((ids, -responses))


def neuron_entropy(responses, labels, k=DEFAULT_TOP_K, n=None, layer="", index=0, ids=None):
    """Entropy of the label histogram of the ``k`` most responsive images."""
    responses = np.asarray(responses, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = _clamp_k(k, len(responses))
    n = int(labels.max()) + 1 if n is None else n
    order = rank_images(responses, ids)[:k]
    counts = np.bincount(labels[order], minlength=n)
    top_ids = order if ids is None else np.asarray(ids)[order]
    return NeuronEntropyRecord(layer, index, float(_entropy_from_counts(counts, k)), top_ids, counts / k)


def layer_entropies(responses, labels, k=DEFAULT_TOP_K, n=None, ids=None):
    """Vectorised :func:`neuron_entropy` over every column of an images x neurons matrix.

    Returns ``(entropies, top_ids, histograms)`` with shapes (neurons,),
    (neurons, k) and (neurons, n).
    """
    responses = np.asarray(responses, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    count = responses.shape[0]
    k = _clamp_k(k, count)
    n = int(labels.max()) + 1 if n is None else n
    ids = np.arange(count) if ids is None else np.asarray(ids)
    by_id = np.argsort(ids, kind="stable")
    order = by_id[np.argsort(-responses[by_id], axis=0, kind="stable")[:k]]
    top_labels = labels[order]
    counts = (top_labels[..., None] == np.arange(n)).sum(axis=0)
    return _entropy_from_counts(counts, k), ids[order].T, counts / k


def neuron_responses(activation):
    """Per-image response of each neuron: spatial max for feature maps, raw value for FC units."""
    a = np.asarray(getattr(activation, "data", activation))
    if a.ndim == 4:
        return a.max(axis=(2, 3))
    if a.ndim == 2:
        return a
    raise ConfigError(f"cannot derive neuron responses from activation of shape {a.shape}")


def collect_responses(net, images, layers, policy, batch_size=64):
    """``{layer: images x neurons}`` responses on eval-mode centre crops."""
    missing = [layer for layer in layers if layer not in net.layer_names]
    if missing:
        raise ConfigError(f"network has no tap(s) {missing}")
    out = {layer: [] for layer in layers}
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = augment_batch(images[i : i + batch_size], policy, train=False)
            acts = net.activations(x, layers)
            for layer in layers:
                out[layer].append(neuron_responses(acts[layer]))
    return {layer: np.concatenate(chunks) for layer, chunks in out.items()}


def les_count(entropies):
    """Low-expressive-score counts per layer.

    The threshold is the smallest per-layer mean entropy; a neuron counts
    when its entropy is strictly below it.  Returns ``(counts, threshold)``.
    """
    usable = {}
    for layer, values in entropies.items():
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            warnings.warn(f"layer {layer!r} has no neurons and is excluded", stacklevel=2)
            continue
        usable[layer] = values
    if not usable:
        raise ContractError("need at least one layer with at least one neuron")
    # correctly rounded means, so the threshold does not depend on summation order
    threshold = min(math.fsum(v.tolist()) / v.size for v in usable.values())
    return {layer: int((v < threshold).sum()) for layer, v in usable.items()}, threshold


def entropy_bin_edges(n, bins=20):
    return np.linspace(0.0, math.log(n) if n > 1 else 1.0, bins + 1)


@dataclass
class EntropyReport:
    tag: str
    n: int
    k: int
    entropies: dict
    top_ids: dict
    histograms: dict
    bin_edges: np.ndarray
    entropy_histograms: dict
    threshold: float
    les: dict

    def records(self, layer):
        return [
            NeuronEntropyRecord(layer, i, float(h), self.top_ids[layer][i], self.histograms[layer][i])
            for i, h in enumerate(self.entropies[layer])
        ]


def entropy_report(responses, labels, k=DEFAULT_TOP_K, n=None, tag="", bins=20, ids=None, bin_edges=None):
    """Entropy statistics for every layer in a ``{layer: images x neurons}`` mapping."""
    labels = np.asarray(labels)
    n = int(labels.max()) + 1 if n is None else n
    edges = entropy_bin_edges(n, bins) if bin_edges is None else bin_edges
    ent, top, hist, ehist = {}, {}, {}, {}
    k_used = k
    for layer, r in responses.items():
        ent[layer], top[layer], hist[layer] = layer_entropies(r, labels, k, n, ids)
        k_used = top[layer].shape[1]
        ehist[layer] = np.histogram(ent[layer], bins=edges)[0]
    counts, threshold = les_count(ent)
    return EntropyReport(tag, n, k_used, ent, top, hist, edges, ehist, threshold, counts)


@dataclass
class Comparison:
    base: EntropyReport
    other: EntropyReport
    deltas: dict = field(default_factory=dict)

    def table(self):
        return format_les_table(self.base, self.other)


def compare_networks(net_a, net_b, images, labels, layers, k=DEFAULT_TOP_K, n=None, bins=20,
                     policy=None, tags=("pre-trained", "fine-tuned")):
    """Entropy reports for two networks on identical bins plus signed LES deltas (b - a)."""
    for net in (net_a, net_b):
        missing = [layer for layer in layers if layer not in net.layer_names]
        if missing:
            raise ConfigError(f"network lacks requested tap(s) {missing}")
    labels = np.asarray(labels)
    n = int(labels.max()) + 1 if n is None else n
    edges = entropy_bin_edges(n, bins)
    ra = entropy_report(collect_responses(net_a, images, layers, policy), labels, k, n, tags[0], bin_edges=edges)
    rb = entropy_report(collect_responses(net_b, images, layers, policy), labels, k, n, tags[1], bin_edges=edges)
    return Comparison(ra, rb, {layer: rb.les[layer] - ra.les[layer] for layer in layers})


def format_les_table(base, other=None):
    """CSV in the layout ``model,<layer>...``: base counts, then signed deltas."""
    layers = list(base.les)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model"] + layers)
    w.writerow([base.tag] + [base.les[layer] for layer in layers])
    if other is not None:
        w.writerow([other.tag] + [f"{other.les[layer] - base.les[layer]:+d}" for layer in layers])
    return buf.getvalue()


def parse_les_table(text):
    """Inverse of :func:`format_les_table`: ``(layers, base_counts, deltas_or_None)``."""
    rows = list(csv.reader(io.StringIO(text)))
    layers = rows[0][1:]
    base = dict(zip(layers, (int(v) for v in rows[1][1:])))
    deltas = dict(zip(layers, (int(v) for v in rows[2][1:]))) if len(rows) > 2 else None
    return layers, base, deltas


def visualize_neuron(images, responses, k=DEFAULT_TOP_K, ids=None):
    """Pixelwise mean of the ``k`` images with the highest response."""
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    images = np.asarray(images)
    k = _clamp_k(k, len(images))
    order = rank_images(responses, ids)[:k]
    return images[order].mean(axis=0, dtype=np.float64).astype(images.dtype), order


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predictions."""

    counts: np.ndarray
    class_names: list

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.counts.sum())

    def normalized(self):
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def to_csv(self, normalized=False):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + self.class_names)
        values = self.normalized() if normalized else self.counts
        for name, row in zip(self.class_names, values):
            w.writerow([name] + [repr(float(v)) if normalized else int(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0][1:]
        counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
        return cls(counts, names)


def confusion_matrix(y_true, y_pred, class_names):
    m = len(class_names)
    counts = np.zeros((m, m), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return ConfusionMatrix(counts, list(class_names))


@dataclass
class EvalResult:
    accuracy: float
    confusion: ConfusionMatrix
    predictions: np.ndarray


def evaluate(net, dataset, indices=None, policy=None, batch_size=128):
    """Accuracy and confusion matrix under single centre-crop evaluation."""
    from .trainer import default_policy, predict_logits

    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if len(indices) == 0:
        raise DataError("cannot evaluate an empty fold")
    if not net.has_head:
        raise ContractError("evaluation needs a network with a classification head")
    num_outputs = net.layers[-1]["out"]
    if num_outputs != dataset.num_classes:
        raise ConfigError(f"network predicts {num_outputs} classes but the dataset has {dataset.num_classes}")
    policy = policy or default_policy(dataset.image_shape, net.input_shape[-1])
    pred = predict_logits(net, dataset.inputs(indices), policy, batch_size).argmax(axis=1)
    truth = dataset.labels[indices]
    cm = confusion_matrix(truth, pred, dataset.class_names)
    return EvalResult(cm.accuracy, cm, pred)


def kfold_mean(accuracies):
    """Unweighted mean of per-fold accuracies."""
    accuracies = list(accuracies)
    if not accuracies:
        raise DataError("no fold accuracies to average")
    return float(sum(accuracies) / len(accuracies))
