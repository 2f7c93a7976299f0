"""Spike-scaling adversarial attack: profile, select neurons, optimize.

The pipeline has three stages. Profiling runs the victim over the test set
and keeps every spiking layer that fires at all (layers whose aggregate
spike map is identically zero are dropped). Neuron selection then picks the
attack's target set: for targeted attacks, the neurons whose firing
co-occurs with correct predictions of the target class (via a class-neuron
correlation matrix); for untargeted attacks, each sample's above-average
firing-rate neurons. Optimization finally runs the signed-gradient attack on
a combined objective: cross-entropy plus a mean-squared spike term that
drives the selected rates toward 1 (amplification) or 0 (suppression).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, AttackProblem, AttackResult, adv_loss, run_attack
from .errors import PreconditionError
from .nn import Network
from .tensor import Tensor, mse


# -- profiling ----------------------------------------------------------------


@dataclass(frozen=True)
class LayerProfile:
    layer: int
    neurons: int
    mean_rate: float
    fired: int          # neurons that spiked at least once over the dataset
    vanished: bool      # no spike anywhere: excluded from target candidates


@dataclass
class CleanStats:
    """Everything one recorded pass over a dataset yields."""

    profiles: list[LayerProfile]
    rates: dict[int, np.ndarray]    # layer -> (N, neurons) per-sample rates
    predictions: np.ndarray


def _frozen(params):
    return {k: Tensor(v.data) for k, v in params.items()}


def clean_statistics(net: Network, params, inputs: np.ndarray, encoding,
                     batch_size: int = 100) -> CleanStats:
    """Record spike maps and predictions over a dataset in one pass."""
    if len(inputs) == 0:
        raise PreconditionError("dataset is empty")
    params = _frozen(params)
    rates = {l: [] for l in net.lif_indices}
    preds = []
    for start in range(0, len(inputs), batch_size):
        batch = inputs[start:start + batch_size]
        out = net.forward(params, encoding.input_tensor(Tensor(batch)), record=True)
        preds.append(out.predictions)
        for l in net.lif_indices:
            rates[l].append(out.record.rates(l))
    rates = {l: np.concatenate(chunks) for l, chunks in rates.items()}
    profiles = []
    for l in net.lif_indices:
        r = rates[l]
        fired = int((r.sum(axis=0) > 0).sum())
        profiles.append(LayerProfile(layer=l, neurons=r.shape[1],
                                     mean_rate=float(r.mean()),
                                     fired=fired, vanished=fired == 0))
    return CleanStats(profiles, rates, np.concatenate(preds))


def candidate_layers(profiles) -> list[LayerProfile]:
    return [p for p in profiles if not p.vanished]


def pick_target_layer(profiles, override: int | None = None) -> int:
    """Deepest non-vanished spiking layer unless an explicit index is given."""
    candidates = candidate_layers(profiles)
    if not candidates:
        raise PreconditionError("every spiking layer is silent; the model is "
                                "untrained or broken")
    if override is None:
        return candidates[-1].layer
    if override not in {p.layer for p in candidates}:
        raise PreconditionError(f"layer {override} is not a profiling candidate")
    return override


# -- neuron selection ----------------------------------------------------------


def class_neuron_correlation(rates: np.ndarray, predictions: np.ndarray,
                             labels: np.ndarray, n_classes: int,
                             min_rate: float = 0.0) -> np.ndarray:
    """Binary class/neuron co-occurrence matrix from correctly predicted samples.

    Entry (c, j) is 1 when some sample of class c was predicted correctly
    while neuron j fired above ``min_rate``. Accumulation is an elementwise
    OR, so sample order cannot matter.
    """
    theta = np.zeros((n_classes, rates.shape[1]), np.uint8)
    correct = predictions == labels
    for cls in range(n_classes):
        mask = correct & (labels == cls)
        if mask.any():
            theta[cls] = (rates[mask] > min_rate).any(axis=0)
    return theta


def eligible_classes(theta: np.ndarray) -> np.ndarray:
    return np.flatnonzero(theta.any(axis=1))


def neurons_for_class(theta: np.ndarray, cls: int) -> np.ndarray:
    return np.flatnonzero(theta[cls])


def choose_target_class(theta: np.ndarray, override: int | None = None) -> int:
    """Eligible class with the largest neuron set; ties go to the lower index."""
    if override is not None:
        if override < 0 or override >= theta.shape[0] or not theta[override].any():
            raise PreconditionError(f"class {override} has no correlated neurons")
        return int(override)
    support = theta.sum(axis=1)
    if support.max() == 0:
        raise PreconditionError("no class has correlated neurons; nothing to target")
    return int(support.argmax())


@dataclass
class SignificanceReport:
    """How much spike mass the above-average neurons of one inference carry."""

    mean_rate: float
    high: np.ndarray          # indices with rate strictly above the mean
    rate_share: float         # their fraction of total spike mass
    count_share: float        # their fraction of the neuron count
    holds: bool               # rate_share > count_share


def high_rate_neurons(rates: np.ndarray) -> tuple[np.ndarray, SignificanceReport]:
    """Above-average neurons of a single rate vector, with the mass comparison."""
    r = np.asarray(rates, np.float64)
    mean = r.mean()
    high = np.flatnonzero(r > mean)
    total = r.sum()
    rate_share = float(r[high].sum() / total) if total > 0 else 0.0
    count_share = high.size / r.size
    return high, SignificanceReport(float(mean), high, rate_share,
                                    float(count_share), rate_share > count_share)


@dataclass
class SuppressionStats:
    """Average-pool drop caused by silencing the above-average neurons."""

    avg: float
    suppressed_avg: float
    delta: float          # avg - suppressed_avg
    delta_direct: float   # sum of high rates / neuron count (same quantity)


def suppression_stats(rates: np.ndarray) -> SuppressionStats:
    r = np.asarray(rates, np.float64)
    mean = r.mean()
    high = r > mean
    avg = r.sum() / r.size
    suppressed = r[~high].sum() / r.size
    return SuppressionStats(float(avg), float(suppressed),
                            float(avg - suppressed),
                            float(r[high].sum() / r.size))


@dataclass
class TargetSet:
    """Where the spike term acts: layer, neuron indices, desired rate."""

    layer: int
    neurons: np.ndarray
    expected_rate: float
    target_class: int | None = None


# -- objectives -----------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    """Trade-off coefficients between the adversarial and spike terms."""

    gamma: float = 1.0   # targeted cross-entropy
    beta: float = 1.0    # targeted spike amplification
    lam: float = 1.0     # untargeted cross-entropy
    mu: float = 1.0      # untargeted spike suppression

    def __post_init__(self):
        if min(self.gamma, self.beta, self.lam, self.mu) < 0:
            raise ValueError("loss weights must be nonnegative")


def spike_target_loss(rates: Tensor, neuron_sets, expected_rate: float) -> Tensor:
    """MSE between the layer's rate map and the amplified/suppressed target.

    The target copies the current rates everywhere except the selected
    neurons, which are pinned at ``expected_rate``; the copy is detached, so
    gradients appear only at selected coordinates. ``neuron_sets`` is either
    one index array shared by all rows or one array per sample.
    """
    target = rates.data.copy()
    if isinstance(neuron_sets, np.ndarray):
        target[:, neuron_sets] = expected_rate
    else:
        if len(neuron_sets) != rates.data.shape[0]:
            raise ValueError("need one neuron set per sample")
        for row, idx in enumerate(neuron_sets):
            target[row, idx] = expected_rate
    return mse(rates, Tensor(target, dtype=rates.data.dtype))


def combined_objective(adv_term: Tensor, spike_term: Tensor | None,
                       weights: LossWeights, mode: str) -> Tensor:
    """Scalar the attack ascends: sign conventions fold the minimizations in.

    Targeted: -(gamma * ce(target)) - beta * spike term.
    Untargeted: lam * ce(label) - mu * spike term.
    """
    if mode == "targeted":
        if weights.gamma == 0 and weights.beta == 0:
            raise ValueError("targeted objective has all-zero coefficients")
        out = -(weights.gamma * adv_term)
        if spike_term is not None and weights.beta != 0:
            out = out - weights.beta * spike_term
        return out
    if weights.lam == 0 and weights.mu == 0:
        raise ValueError("untargeted objective has all-zero coefficients")
    out = weights.lam * adv_term
    if spike_term is not None and weights.mu != 0:
        out = out - weights.mu * spike_term
    return out


# -- end-to-end ------------------------------------------------------------------


@dataclass
class ScalingAttackOutcome:
    result: AttackResult
    target: TargetSet
    neuron_sets: object                     # shared array or per-sample list
    layer: int
    profiles: list[LayerProfile]
    significance: list[SignificanceReport] | None
    rates_before: np.ndarray                # full (N, neurons) rate maps at the layer
    rates_after: np.ndarray
    mean_rate_before: float                 # over the selected neurons
    mean_rate_after: float


def _selected_mean(rate_map: np.ndarray, neuron_sets) -> float:
    if isinstance(neuron_sets, np.ndarray):
        if neuron_sets.size == 0:
            return float("nan")
        return float(rate_map[:, neuron_sets].mean())
    vals = [rate_map[i, idx].mean() for i, idx in enumerate(neuron_sets) if idx.size]
    return float(np.mean(vals)) if vals else float("nan")


def generate(net: Network, params, inputs: np.ndarray, labels: np.ndarray,
             encoding, cfg: AttackConfig, weights: LossWeights | None = None,
             *, method: str = "pgd", layer: int | None = None,
             target_class: int | None = None, n_classes: int | None = None,
             min_rate: float = 0.0, batch_size: int = 100,
             stats: CleanStats | None = None) -> ScalingAttackOutcome:
    """Full pipeline: profile, select neurons, optimize, measure the shift.

    ``stats`` can carry a precomputed clean pass to avoid re-profiling when
    sweeping. With ``weights`` beta/mu set to zero this degrades gracefully
    to the plain cross-entropy attack (the spike term is skipped entirely).
    """
    labels = np.asarray(labels, np.int64)
    weights = weights or LossWeights()
    n_classes = n_classes or int(labels.max()) + 1
    frozen = _frozen(params)
    if stats is None:
        stats = clean_statistics(net, frozen, inputs, encoding, batch_size)
    layer = pick_target_layer(stats.profiles, layer)
    clean_rates = stats.rates[layer]

    mode = cfg.mode
    significance = None
    if mode == "targeted":
        theta = class_neuron_correlation(clean_rates, stats.predictions, labels,
                                         n_classes, min_rate)
        chosen = choose_target_class(theta, target_class)
        neurons = neurons_for_class(theta, chosen)
        if neurons.size == 0:
            raise PreconditionError(f"class {chosen} has no correlated neurons")
        target = TargetSet(layer, neurons, 1.0, chosen)
        neuron_sets: object = neurons
    else:
        per_sample = []
        significance = []
        for row in clean_rates:
            idx, report = high_rate_neurons(row)
            per_sample.append(idx)
            significance.append(report)
        summary_idx, _ = high_rate_neurons(clean_rates.mean(axis=0))
        target = TargetSet(layer, summary_idx, 0.0, None)
        neuron_sets = per_sample

    use_spike = (weights.beta if mode == "targeted" else weights.mu) != 0

    def predict(x: np.ndarray) -> np.ndarray:
        preds = []
        for start in range(0, len(x), batch_size):
            chunk = x[start:start + batch_size]
            out = net.forward(frozen, encoding.input_tensor(Tensor(chunk)))
            preds.append(out.predictions)
        return np.concatenate(preds)

    chunks = []
    for start in range(0, len(inputs), batch_size):
        stop = min(start + batch_size, len(inputs))
        batch_labels = labels[start:stop]
        if isinstance(neuron_sets, np.ndarray):
            batch_sets = neuron_sets
        else:
            batch_sets = neuron_sets[start:stop]

        def objective(var: Tensor) -> Tensor:
            out = net.forward(frozen, encoding.input_tensor(var),
                              rate_layers=(layer,) if use_spike else ())
            adv = adv_loss(out.logits, batch_labels, mode, target.target_class)
            spike = None
            if use_spike:
                spike = spike_target_loss(out.rates[layer], batch_sets,
                                          target.expected_rate)
            return combined_objective(adv, spike, weights, mode)

        problem = AttackProblem(objective, predict, batch_labels,
                                target.target_class)
        chunks.append(run_attack(problem, inputs[start:stop], cfg, method))

    result = AttackResult(
        adversarial=np.concatenate([c.adversarial for c in chunks]),
        deltas=np.concatenate([c.deltas for c in chunks]),
        predictions=np.concatenate([c.predictions for c in chunks]),
        succeeded=np.concatenate([c.succeeded for c in chunks]),
        zero_grad=np.concatenate([c.zero_grad for c in chunks]),
    )

    after = clean_statistics(net, frozen, result.adversarial, encoding, batch_size)
    adv_rates = after.rates[layer]
    return ScalingAttackOutcome(
        result=result, target=target, neuron_sets=neuron_sets, layer=layer,
        profiles=stats.profiles, significance=significance,
        rates_before=clean_rates, rates_after=adv_rates,
        mean_rate_before=_selected_mean(clean_rates, neuron_sets),
        mean_rate_after=_selected_mean(adv_rates, neuron_sets),
    )


# -- plain-text serialization ------------------------------------------------


def _fmt_indices(indices: np.ndarray) -> str:
    return " ".join(str(int(i)) for i in indices)


def write_target_set(path, target: TargetSet):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# target-set v1\n")
        fh.write(f"layer = {target.layer}\n")
        mode = "targeted" if target.target_class is not None else "untargeted"
        fh.write(f"mode = {mode}\n")
        if target.target_class is not None:
            fh.write(f"target_class = {target.target_class}\n")
        fh.write(f"expected_rate = {target.expected_rate:g}\n")
        fh.write(f"neurons = {_fmt_indices(target.neurons)}\n")


def read_target_set(path) -> TargetSet:
    fields = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    neurons = np.array([int(v) for v in fields.get("neurons", "").split()], np.int64)
    cls = int(fields["target_class"]) if "target_class" in fields else None
    return TargetSet(int(fields["layer"]), neurons,
                     float(fields["expected_rate"]), cls)


def write_significance(path, layer: int, reports: list[SignificanceReport]):
    """Aggregate per-sample reports into one key/value document."""
    rate_share = float(np.mean([r.rate_share for r in reports]))
    count_share = float(np.mean([r.count_share for r in reports]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# significance v1\n")
        fh.write(f"layer = {layer}\n")
        fh.write(f"samples = {len(reports)}\n")
        fh.write(f"rate_share = {rate_share:.6f}\n")
        fh.write(f"count_share = {count_share:.6f}\n")
        fh.write(f"holds = {'true' if rate_share > count_share else 'false'}\n")
